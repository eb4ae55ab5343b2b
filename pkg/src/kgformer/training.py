"""Loss functions, the adaptive-moment optimizer, and the train/eval loops."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward
from .data import WindowDataset
from .errors import ConfigError, ContractError, DivergenceError, ShapeError
from .model import Forecaster
from .seeding import rng_for


def mse_loss(pred: Tensor, truth: Tensor, reduction: str = "mean") -> Tensor:
    """Squared-error objective.

    ``mean`` averages over every entry (the reporting convention);
    ``channel_sum`` keeps the raw per-channel squared norms summed over time
    and averaged over channels only.
    """
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {pred.shape} vs truth {truth.shape}")
    sq = ad.square(ad.sub(pred, truth))
    if reduction == "mean":
        return ad.mean_(sq)
    if reduction == "channel_sum":
        m = pred.shape[-1]
        return ad.scale(ad.sum_(sq), 1.0 / m)
    raise ConfigError(f"unknown reduction '{reduction}'")


def mae(pred: Tensor, truth: Tensor) -> Tensor:
    """Mean absolute deviation over all entries."""
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {pred.shape} vs truth {truth.shape}")
    return ad.mean_(ad.absolute(ad.sub(pred, truth)))


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 10
    patience: int = 3
    lr_decay: float = 0.5  # per epoch after the first
    seed: int = 0
    grad_clip_norm: float = 5.0
    loss_reduction: str = "mean"

    def __post_init__(self):
        for name in ("learning_rate", "batch_size", "max_epochs", "patience", "grad_clip_norm"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.patience > self.max_epochs:
            raise ConfigError(
                f"patience {self.patience} exceeds max_epochs {self.max_epochs}"
            )


@dataclass
class MetricsRecord:
    mse: float
    mae: float
    horizon: int
    dataset: str
    use_kge: bool
    seed: int

    def __post_init__(self):
        if self.mse < 0 or self.mae < 0:
            raise ContractError("metrics must be non-negative")

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "horizon": self.horizon,
            "use_kge": self.use_kge,
            "seed": self.seed,
            "mse": self.mse,
            "mae": self.mae,
        }


class Adam:
    """Adaptive-moment optimizer with bias correction."""

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 1e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data, dtype=np.float64) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data, dtype=np.float64) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= (self.lr * update).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def clip_gradients(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all grads so their joint 2-norm is at most ``max_norm``."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0:
        factor = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= factor
    return norm


@dataclass
class EpochStats:
    epoch: int
    train_mse: float
    val_mse: float
    learning_rate: float


@dataclass
class History:
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int = -1
    best_val_mse: float = math.inf
    steps: int = 0


def _forward_batch(model: Forecaster, batch, training: bool) -> tuple[Tensor, Tensor]:
    x_enc, x_dec, marks_enc, marks_dec, y = batch
    pred = model.forecast(
        Tensor(x_enc, dtype=model.dtype),
        marks_enc,
        Tensor(x_dec, dtype=model.dtype),
        marks_dec,
        training=training,
    )
    return pred, Tensor(y, dtype=model.dtype)


def train(
    model: Forecaster,
    train_ds: WindowDataset,
    val_ds: WindowDataset,
    config: TrainConfig,
    log=None,
) -> History:
    """Optimize until max_epochs or early stop on validation MSE.

    Batch order is a seeded shuffle per epoch; the learning rate halves each
    epoch after the first; the parameters from the best-validation epoch are
    restored before returning.
    """
    params = model.parameters()
    opt = Adam(params, lr=config.learning_rate)
    model.reset_dropout_rng(config.seed)
    history = History()
    best_params: dict[str, np.ndarray] = {}
    bad_epochs = 0

    for epoch in range(config.max_epochs):
        lr = config.learning_rate * (config.lr_decay ** max(0, epoch))
        opt.lr = lr
        order = rng_for(config.seed, "batches", epoch).permutation(len(train_ds))
        total_loss = 0.0
        total_count = 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            batch = train_ds.batch(idx)
            with Tape() as tape:
                pred, truth = _forward_batch(model, batch, training=True)
                loss = mse_loss(pred, truth, config.loss_reduction)
                loss_val = loss.item()
                if not math.isfinite(loss_val):
                    raise DivergenceError(
                        f"non-finite training loss {loss_val} at epoch {epoch}, "
                        f"step {history.steps} (lr={lr:g})"
                    )
                backward(loss, tape)
            clip_gradients(params, config.grad_clip_norm)
            opt.step()
            opt.zero_grad()
            history.steps += 1
            total_loss += loss_val * len(idx)
            total_count += len(idx)

        train_mse = total_loss / total_count
        val_mse, _ = evaluate_metrics(model, val_ds, config.batch_size)
        if not math.isfinite(val_mse):
            raise DivergenceError(f"non-finite validation MSE at epoch {epoch}")
        history.epochs.append(EpochStats(epoch, train_mse, val_mse, lr))
        if log is not None:
            log(epoch=epoch, train_mse=train_mse, val_mse=val_mse)

        if val_mse < history.best_val_mse:
            history.best_val_mse = val_mse
            history.best_epoch = epoch
            best_params = {k: p.data.copy() for k, p in params.items()}
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.patience:
                break

    for k, p in params.items():
        p.data = best_params[k]
    return history


def train_steps(
    model: Forecaster,
    train_ds: WindowDataset,
    config: TrainConfig,
    n_steps: int,
) -> list[float]:
    """Fixed-step optimization without validation (overfitting checks)."""
    params = model.parameters()
    opt = Adam(params, lr=config.learning_rate)
    model.reset_dropout_rng(config.seed)
    losses = []
    step = 0
    epoch = 0
    while step < n_steps:
        order = rng_for(config.seed, "batches", epoch).permutation(len(train_ds))
        for start in range(0, len(order), config.batch_size):
            if step >= n_steps:
                break
            idx = order[start : start + config.batch_size]
            with Tape() as tape:
                pred, truth = _forward_batch(model, train_ds.batch(idx), training=True)
                loss = mse_loss(pred, truth, config.loss_reduction)
                lv = loss.item()
                if not math.isfinite(lv):
                    raise DivergenceError(f"non-finite loss {lv} at step {step}")
                backward(loss, tape)
            clip_gradients(params, config.grad_clip_norm)
            opt.step()
            opt.zero_grad()
            losses.append(lv)
            step += 1
        epoch += 1
    return losses


def evaluate_metrics(
    model: Forecaster, ds: WindowDataset, batch_size: int = 64
) -> tuple[float, float]:
    """(MSE, MAE) over every window of a partition, eval mode.

    Accumulation order is fixed, so repeated evaluation is identical.
    """
    if len(ds) == 0:
        raise ConfigError("cannot evaluate on an empty window set")
    sq_sum = 0.0
    abs_sum = 0.0
    count = 0
    for start in range(0, len(ds), batch_size):
        idx = np.arange(start, min(start + batch_size, len(ds)))
        x_enc, x_dec, marks_enc, marks_dec, y = ds.batch(idx)
        pred = model.forecast(
            Tensor(x_enc, dtype=model.dtype), marks_enc,
            Tensor(x_dec, dtype=model.dtype), marks_dec,
            training=False,
        )
        diff = pred.data.astype(np.float64) - y.astype(np.float64)
        sq_sum += float(np.sum(diff * diff))
        abs_sum += float(np.sum(np.abs(diff)))
        count += diff.size
    return sq_sum / count, abs_sum / count


def evaluate(
    model: Forecaster,
    ds: WindowDataset,
    dataset_name: str,
    seed: int,
    batch_size: int = 64,
) -> MetricsRecord:
    mse_val, mae_val = evaluate_metrics(model, ds, batch_size)
    return MetricsRecord(
        mse=mse_val,
        mae=mae_val,
        horizon=model.config.horizon,
        dataset=dataset_name,
        use_kge=model.config.use_kge,
        seed=seed,
    )
