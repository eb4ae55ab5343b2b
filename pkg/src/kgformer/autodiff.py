"""Dense tensors with reverse-mode differentiation.

A ``Tensor`` wraps a numpy array (float32 by default, float64 for
verification work) plus an optional gradient buffer. Operations executed
while a ``Tape`` is active record a pullback closure; ``backward`` replays
the tape in reverse, visiting every recorded op exactly once and
accumulating gradients into every ``requires_grad`` tensor reachable from
the loss. The tape is rebuilt on every forward pass (define-by-run), which
keeps masking and mode switches trivially correct.

All array math is delegated to numpy; the differentiation rules live here.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, ShapeError

DEFAULT_DTYPE = np.float32

# Additive mask value: large enough to zero out softmax weight, small enough
# to stay finite in float32 after the max-shift.
MASK_FILL = -1e9


class Tensor:
    """N-dimensional float array participating in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() requires a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray, fresh: bool = False) -> None:
        """Add ``g`` into the gradient buffer.

        ``fresh`` marks arrays the caller just allocated and will not touch
        again; those are adopted without a defensive copy. Views or shared
        buffers must stay ``fresh=False``.
        """
        if self.grad is None:
            if fresh and g.dtype == self.data.dtype:
                self.grad = g
            elif g.dtype == self.data.dtype:
                self.grad = g.copy()
            else:
                self.grad = g.astype(self.data.dtype)
        else:
            self.grad += g

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{flag})"

    # Operator sugar used throughout the model code.
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other, self.dtype))


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


class Tape:
    """Ordered record of one forward pass.

    Usable as a context manager; ops executed inside record themselves when
    their output requires grad.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def record(self, out: Tensor, pullback: Callable[[np.ndarray], None]) -> None:
        self._nodes.append((out, pullback))

    def __len__(self) -> int:
        return len(self._nodes)

    def __enter__(self) -> "Tape":
        _push_tape(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _pop_tape(self)


_TAPE_STACK: list[Tape] = []


def _push_tape(tape: Tape) -> None:
    _TAPE_STACK.append(tape)


def _pop_tape(tape: Tape) -> None:
    if not _TAPE_STACK or _TAPE_STACK[-1] is not tape:
        raise ContractError("tape context exited out of order")
    _TAPE_STACK.pop()


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate grads of every requires_grad tensor reachable from ``loss``."""
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.data)
    for out, pullback in reversed(tape._nodes):
        if out.grad is None:
            continue
        pullback(out.grad)


def _record(inputs: Sequence[Tensor], out: Tensor, pullback) -> Tensor:
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, pullback)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise and linear-algebra ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)

    def pullback(g):
        if a.requires_grad:
            ga = _unbroadcast(g, a.shape)
            a.accumulate_grad(ga, fresh=ga is not g)
        if b.requires_grad:
            gb = _unbroadcast(g, b.shape)
            b.accumulate_grad(gb, fresh=gb is not g)

    return _record((a, b), out, pullback)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)

    def pullback(g):
        if a.requires_grad:
            ga = _unbroadcast(g, a.shape)
            a.accumulate_grad(ga, fresh=ga is not g)
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.shape), fresh=True)

    return _record((a, b), out, pullback)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)

    def pullback(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.shape), fresh=True)
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.shape), fresh=True)

    return _record((a, b), out, pullback)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)  # numpy scalars would promote float32 operands
    out = Tensor(a.data * s)

    def pullback(g):
        if a.requires_grad:
            a.accumulate_grad(g * s, fresh=True)

    return _record((a,), out, pullback)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with broadcasting over leading dims.

    Gradient rules: dA = dC @ B^T, dB = A^T @ dC (summed over broadcast dims).
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))

    def pullback(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a.accumulate_grad(_unbroadcast(ga, a.shape), fresh=True)
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b.accumulate_grad(_unbroadcast(gb, b.shape), fresh=True)

    return _record((a, b), out, pullback)


def permute(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = Tensor(np.transpose(a.data, axes))
    inv = np.argsort(axes)

    def pullback(g):
        if a.requires_grad:
            a.accumulate_grad(np.transpose(g, inv))

    return _record((a,), out, pullback)


def swap_last2(a: Tensor) -> Tensor:
    axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    return permute(a, axes)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(a.data.reshape(shape))

    def pullback(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(a.shape))

    return _record((a,), out, pullback)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = Tensor(a.data[index].copy())

    def pullback(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[index] = g
            a.accumulate_grad(full, fresh=True)

    return _record((a,), out, pullback)


def roll(a: Tensor, shift: int, axis: int) -> Tensor:
    out = Tensor(np.roll(a.data, shift, axis=axis))

    def pullback(g):
        if a.requires_grad:
            a.accumulate_grad(np.roll(g, -shift, axis=axis), fresh=True)

    return _record((a,), out, pullback)


def gather_rows(table: Tensor, idx: np.ndarray) -> Tensor:
    """Look up ``table`` rows: out[..., :] = table[idx[...], :].

    Raises ContractError when an index falls outside the table.
    """
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ContractError(
            f"lookup index out of range [0, {table.shape[0]}): "
            f"min={idx.min()}, max={idx.max()}"
        )
    out = Tensor(table.data[idx])

    def pullback(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, idx, g)
            table.accumulate_grad(gt, fresh=True)

    return _record((table,), out, pullback)


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0))

    def pullback(g):
        if a.requires_grad:
            a.accumulate_grad(g * (a.data > 0), fresh=True)

    return _record((a,), out, pullback)


def square(a: Tensor) -> Tensor:
    out = Tensor(a.data * a.data)

    def pullback(g):
        if a.requires_grad:
            a.accumulate_grad(g * (2.0 * a.data), fresh=True)

    return _record((a,), out, pullback)


def absolute(a: Tensor) -> Tensor:
    out = Tensor(np.abs(a.data))

    def pullback(g):
        if a.requires_grad:
            a.accumulate_grad(g * np.sign(a.data), fresh=True)

    return _record((a,), out, pullback)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def pullback(g):
        if a.requires_grad:
            if axis is None:
                a.accumulate_grad(np.broadcast_to(g, a.shape).copy(), fresh=True)
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                a.accumulate_grad(np.broadcast_to(gg, a.shape).copy(), fresh=True)

    return _record((a,), out, pullback)


def mean_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def softmax_rows(a: Tensor) -> Tensor:
    """Row softmax over the last axis, stabilized by max-subtraction.

    Additive masks (large negative fills) are applied by the caller before
    this op; the max-shift keeps masked logits harmless.
    """
    if a.shape[-1] < 1:
        raise ShapeError(f"softmax_rows requires last dimension >= 1, got {a.shape}")
    y = a.data - a.data.max(axis=-1, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def pullback(g):
        if a.requires_grad:
            dot = (g * y).sum(axis=-1, keepdims=True)
            ga = g - dot
            ga *= y
            a.accumulate_grad(ga, fresh=True)

    return _record((a,), out, pullback)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-position normalization over the last axis, then affine transform."""
    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be > 0, got {eps}")
    d = a.shape[-1]
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)

    def pullback(g):
        if gain.requires_grad:
            gain.accumulate_grad((g * xhat).reshape(-1, d).sum(axis=0), fresh=True)
        if bias.requires_grad:
            bias.accumulate_grad(g.reshape(-1, d).sum(axis=0), fresh=True)
        if a.requires_grad:
            gx = g * gain.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            a.accumulate_grad(inv * (gx - m1 - xhat * m2), fresh=True)

    return _record((a, gain, bias), out, pullback)


def dropout(a: Tensor, rate: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or rate == 0."""
    if not training or rate == 0.0:
        return a
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    keep = (rng.random(a.shape) >= rate).astype(a.dtype) / (1.0 - rate)
    out = Tensor(a.data * keep)

    def pullback(g):
        if a.requires_grad:
            a.accumulate_grad(g * keep, fresh=True)

    return _record((a,), out, pullback)


def conv1d_circular(x: Tensor, kernel: Tensor) -> Tensor:
    """Circular 1-d convolution along the time axis.

    ``x`` is (..., L, M), ``kernel`` is (width, M, D) with odd width; the
    output is (..., L, D) -- length preserved by circular padding.
    """
    if kernel.ndim != 3:
        raise ShapeError(f"kernel must be (width, M, D), got {kernel.shape}")
    width, m_in, _ = kernel.shape
    if width % 2 == 0:
        raise ConfigError(f"conv1d_circular kernel width must be odd, got {width}")
    if x.shape[-1] != m_in:
        raise ShapeError(
            f"conv1d_circular channel mismatch: input {x.shape} vs kernel {kernel.shape}"
        )
    p = width // 2
    time_axis = x.ndim - 2
    out = None
    for k in range(width):
        tap = reshape(slice_axis(kernel, 0, k, k + 1), kernel.shape[1:])
        term = matmul(roll(x, p - k, axis=time_axis), tap)
        out = term if out is None else add(out, term)
    return out


def fused_attention(
    q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None
) -> Tensor:
    """softmax(q k^T / sqrt(d_k)) v as a single tape node.

    Equivalent to composing scale/matmul/softmax_rows/matmul; fused so the
    (T_q, T_k) probability array is allocated once per direction instead of
    several times. q, k, v share leading dims; ``mask`` is boolean (T_q,
    T_k), True = attend allowed.
    """
    s = 1.0 / math.sqrt(q.shape[-1])
    logits = np.matmul(q.data * s, np.swapaxes(k.data, -1, -2))
    if mask is not None:
        logits += np.where(mask, 0.0, MASK_FILL).astype(logits.dtype)
    logits -= logits.max(axis=-1, keepdims=True)
    np.exp(logits, out=logits)
    logits /= logits.sum(axis=-1, keepdims=True)
    probs = logits
    out = Tensor(np.matmul(probs, v.data))

    def pullback(g):
        gp = np.matmul(g, np.swapaxes(v.data, -1, -2))
        if v.requires_grad:
            gv = np.matmul(np.swapaxes(probs, -1, -2), g)
            v.accumulate_grad(_unbroadcast(gv, v.shape), fresh=True)
        # softmax backward, in place on gp
        dot = (gp * probs).sum(axis=-1, keepdims=True)
        gp -= dot
        gp *= probs
        if q.requires_grad:
            gq = np.matmul(gp, k.data)
            gq *= s
            q.accumulate_grad(_unbroadcast(gq, q.shape), fresh=True)
        if k.requires_grad:
            gk = np.matmul(np.swapaxes(gp, -1, -2), q.data)
            gk *= s
            k.accumulate_grad(_unbroadcast(gk, k.shape), fresh=True)

    return _record((q, k, v), out, pullback)


# ---------------------------------------------------------------------------
# Verification oracle
# ---------------------------------------------------------------------------


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-4,
) -> float:
    """Compare analytic gradients of ``f`` against central differences.

    ``f`` builds the scalar loss from the current parameter values. Analytic
    gradients come from one taped forward/backward; the finite differences
    perturb each parameter element in turn. Relative error uses the
    denominator max(|analytic|, |numeric|, 1e-8). Parameters should be
    float64 and any dropout disabled; a non-deterministic ``f`` raises.
    """
    params = list(params)

    def eval_plain() -> float:
        return float(f().item())

    base1 = eval_plain()
    base2 = eval_plain()
    if base1 != base2:
        raise ContractError(
            "finite_diff_check requires a deterministic objective "
            "(is dropout still enabled?)"
        )

    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
        backward(loss, tape)
    analytic = [None if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, g in zip(params, analytic):
        if g is None:
            g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = eval_plain()
            flat[i] = orig - eps
            down = eval_plain()
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            denom = max(abs(gflat[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(gflat[i] - numeric) / denom)
    return worst
