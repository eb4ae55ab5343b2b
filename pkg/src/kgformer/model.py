"""Encoder-decoder attention forecaster with direct multi-step output.

The encoder reads the embedded lookback window; the decoder reads a
scaffold of the last ``label_len`` observations followed by zero
placeholders for the horizon, with causal masking on its self-attention.
One affine head maps decoder states back to channel space, and the final
``horizon`` rows are the forecast -- the whole horizon in a single pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import embeddings as emb
from .autodiff import Tensor
from .errors import ConfigError, ContractError, ShapeError
from .seeding import rng_for


@dataclass
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    d_k: int | None = None
    d_v: int | None = None
    n_enc_layers: int = 2
    n_dec_layers: int = 1
    d_ff: int = 128
    dropout: float = 0.05
    lookback: int = 336
    label_len: int = 48
    horizon: int = 96
    channels: int = 7
    use_kge: bool = False
    kge_reduce: emb.Reduce = emb.Reduce.SUM
    freq: emb.Freq = emb.Freq.HOURLY
    kernel_width: int = 3

    def __post_init__(self):
        if self.d_k is None:
            if self.d_model % self.n_heads != 0:
                raise ConfigError(
                    f"d_model={self.d_model} not divisible by n_heads={self.n_heads}; "
                    "set d_k/d_v explicitly"
                )
            self.d_k = self.d_model // self.n_heads
        if self.d_v is None:
            self.d_v = self.d_k
        for name in ("d_model", "n_heads", "d_ff", "lookback", "label_len", "horizon", "channels"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def dec_len(self) -> int:
        return self.label_len + self.horizon


@dataclass
class AttentionWeights:
    """Projection matrices of one attention block."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    n_heads: int


def causal_mask(t: int) -> np.ndarray:
    """Boolean (t, t) mask, True where attending is allowed (j <= i)."""
    return np.tril(np.ones((t, t), dtype=bool))


def _heads_first(x: Tensor) -> Tensor:
    """(..., T, h, d) -> (..., h, T, d)."""
    n = x.ndim
    axes = tuple(range(n - 3)) + (n - 2, n - 3, n - 1)
    return ad.permute(x, axes)


def _merge_heads(x: Tensor) -> Tensor:
    """(..., h, T, d) -> (..., T, h*d)."""
    n = x.ndim
    axes = tuple(range(n - 3)) + (n - 2, n - 3, n - 1)
    x = ad.permute(x, axes)
    *lead, t, h, d = x.shape
    return ad.reshape(x, (*lead, t, h * d))


def project_qkv(
    z: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, n_heads: int
) -> tuple[Tensor, Tensor, Tensor]:
    """Linear projections of the embedded sequence, reshaped into head blocks.

    Returns (..., T, h, d_k/d_v) tensors.
    """
    def proj(w: Tensor) -> Tensor:
        y = ad.matmul(z, w)
        *lead, t, hd = y.shape
        return ad.reshape(y, (*lead, t, n_heads, hd // n_heads))

    return proj(wq), proj(wk), proj(wv)


def scaled_dot_attention(
    q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None
) -> Tensor:
    """softmax(Q K^T / sqrt(d_k)) V over the last two axes.

    ``mask`` is boolean (T_q, T_k), True = attend allowed; disallowed
    positions get a large negative additive constant before the softmax.
    Every query row must keep at least one allowed key.
    """
    if mask is not None and not mask.any(axis=-1).all():
        raise ContractError("attention mask leaves a query row with no keys")
    return ad.fused_attention(q, k, v, mask)


def multi_head(
    z_q: Tensor,
    z_kv: Tensor,
    weights: AttentionWeights,
    mask: np.ndarray | None = None,
) -> Tensor:
    """Heads computed independently, concatenated, projected by W_O."""
    h = weights.n_heads

    def proj(z: Tensor, w: Tensor) -> Tensor:
        y = ad.matmul(z, w)
        *lead, t, hd = y.shape
        return _heads_first(ad.reshape(y, (*lead, t, h, hd // h)))

    q = proj(z_q, weights.wq)
    k = proj(z_kv, weights.wk)
    v = proj(z_kv, weights.wv)
    att = scaled_dot_attention(q, k, v, mask)
    return ad.matmul(_merge_heads(att), weights.wo)


class Forecaster:
    """Owns all learnable parameters and runs the forward pass.

    One instance per training run; a forward/backward pass is
    single-threaded. Parameter initialization draws an independent named
    stream per tensor, so two models built from the same seed share every
    parameter they have in common regardless of which optional parts exist.
    """

    def __init__(
        self,
        config: ModelConfig,
        adjacency: np.ndarray | None = None,
        seed: int = 0,
        dtype=np.float32,
    ):
        self.config = config
        self.dtype = dtype
        self.seed = seed
        if config.use_kge:
            if adjacency is None:
                raise ConfigError("use_kge=True requires an adjacency matrix")
            adjacency = np.asarray(adjacency, dtype=dtype)
            if adjacency.shape[0] != adjacency.shape[1]:
                raise ShapeError(f"adjacency must be square, got {adjacency.shape}")
        self.adjacency = adjacency if config.use_kge else None
        self._params: dict[str, Tensor] = {}
        self._dropout_rng = rng_for(seed, "dropout")
        self._build()
        c = config
        self._pe_enc = emb.positional_encoding(c.lookback, c.d_model, dtype)
        self._pe_dec = emb.positional_encoding(c.dec_len, c.d_model, dtype)
        self._causal = causal_mask(c.dec_len)

    # -- parameters ---------------------------------------------------------

    def _add_param(self, name: str, shape: tuple[int, ...], fan_in: int | None) -> Tensor:
        rng = rng_for(self.seed, "param", name)
        if fan_in is None:
            data = np.zeros(shape, dtype=self.dtype)
        elif fan_in == 0:  # ones (layer-norm gains)
            data = np.ones(shape, dtype=self.dtype)
        else:
            bound = 1.0 / np.sqrt(fan_in)
            data = rng.uniform(-bound, bound, size=shape).astype(self.dtype)
        t = Tensor(data, requires_grad=True)
        self._params[name] = t
        return t

    def _build(self) -> None:
        c = self.config
        d, h = c.d_model, c.n_heads
        for side, t_len in (("enc", c.lookback), ("dec", c.dec_len)):
            self._add_param(f"{side}_embed.kernel", (c.kernel_width, c.channels, d),
                            c.kernel_width * c.channels)
            for mark in c.freq.mark_names:
                self._add_param(f"{side}_embed.{mark}", (emb.MARK_TABLE_SIZES[mark], d), d)
        if c.use_kge:
            v = self.adjacency.shape[0]
            self._add_param("kge.w_l", (v, d), v)
            self._add_param("kge.w_p_enc", (c.lookback, d), c.lookback)
            self._add_param("kge.w_p_dec", (c.dec_len, d), c.dec_len)
        for i in range(c.n_enc_layers):
            self._build_attention(f"enc.{i}.self", d, h, c.d_k, c.d_v)
            self._build_ffn_and_norms(f"enc.{i}", d, c.d_ff, n_norms=2)
        for i in range(c.n_dec_layers):
            self._build_attention(f"dec.{i}.self", d, h, c.d_k, c.d_v)
            self._build_attention(f"dec.{i}.cross", d, h, c.d_k, c.d_v)
            self._build_ffn_and_norms(f"dec.{i}", d, c.d_ff, n_norms=3)
        self._add_param("head.w", (d, c.channels), d)
        self._add_param("head.b", (c.channels,), None)

    def _build_attention(self, prefix: str, d: int, h: int, d_k: int, d_v: int) -> None:
        self._add_param(f"{prefix}.wq", (d, h * d_k), d)
        self._add_param(f"{prefix}.wk", (d, h * d_k), d)
        self._add_param(f"{prefix}.wv", (d, h * d_v), d)
        self._add_param(f"{prefix}.wo", (h * d_v, d), h * d_v)

    def _build_ffn_and_norms(self, prefix: str, d: int, d_ff: int, n_norms: int) -> None:
        self._add_param(f"{prefix}.ff.w1", (d, d_ff), d)
        self._add_param(f"{prefix}.ff.b1", (d_ff,), None)
        self._add_param(f"{prefix}.ff.w2", (d_ff, d), d_ff)
        self._add_param(f"{prefix}.ff.b2", (d,), None)
        for n in range(1, n_norms + 1):
            self._add_param(f"{prefix}.ln{n}.gain", (d,), 0)
            self._add_param(f"{prefix}.ln{n}.bias", (d,), None)

    def parameters(self) -> dict[str, Tensor]:
        return self._params

    def parameter_count(self) -> int:
        return sum(p.size for p in self._params.values())

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    def reset_dropout_rng(self, seed: int) -> None:
        self._dropout_rng = rng_for(seed, "dropout")

    def set_precision(self, dtype) -> None:
        """Convert all parameters in place (for 64-bit verification runs)."""
        self.dtype = dtype
        for p in self._params.values():
            p.data = p.data.astype(dtype)
        self._pe_enc = self._pe_enc.astype(dtype)
        self._pe_dec = self._pe_dec.astype(dtype)
        if self.adjacency is not None:
            self.adjacency = self.adjacency.astype(dtype)

    # -- forward ------------------------------------------------------------

    def _attn_weights(self, prefix: str) -> AttentionWeights:
        p = self._params
        return AttentionWeights(
            wq=p[f"{prefix}.wq"], wk=p[f"{prefix}.wk"],
            wv=p[f"{prefix}.wv"], wo=p[f"{prefix}.wo"],
            n_heads=self.config.n_heads,
        )

    def _dropout(self, x: Tensor, training: bool) -> Tensor:
        return ad.dropout(x, self.config.dropout, self._dropout_rng, training)

    def _sublayer(self, x: Tensor, out: Tensor, prefix: str, training: bool) -> Tensor:
        p = self._params
        return ad.layer_norm(
            ad.add(x, self._dropout(out, training)),
            p[f"{prefix}.gain"], p[f"{prefix}.bias"],
        )

    def _ffn(self, x: Tensor, prefix: str) -> Tensor:
        p = self._params
        hidden = ad.relu(ad.add(ad.matmul(x, p[f"{prefix}.w1"]), p[f"{prefix}.b1"]))
        return ad.add(ad.matmul(hidden, p[f"{prefix}.w2"]), p[f"{prefix}.b2"])

    def embed_encoder(self, x_enc: Tensor, marks_enc: np.ndarray, training: bool = False) -> Tensor:
        c = self.config
        kge = None
        if c.use_kge:
            kge = emb.build_kge(
                self.adjacency,
                emb.KgeParams(self._params["kge.w_l"], self._params["kge.w_p_enc"], c.kge_reduce),
            )
        z = emb.compose_input(
            x_enc, marks_enc, self._params["enc_embed.kernel"],
            {m: self._params[f"enc_embed.{m}"] for m in c.freq.mark_names},
            self._pe_enc, c.freq, kge,
        )
        return self._dropout(z, training)

    def embed_decoder(self, x_dec: Tensor, marks_dec: np.ndarray, training: bool = False) -> Tensor:
        c = self.config
        kge = None
        if c.use_kge:
            kge = emb.build_kge(
                self.adjacency,
                emb.KgeParams(self._params["kge.w_l"], self._params["kge.w_p_dec"], c.kge_reduce),
            )
        z = emb.compose_input(
            x_dec, marks_dec, self._params["dec_embed.kernel"],
            {m: self._params[f"dec_embed.{m}"] for m in c.freq.mark_names},
            self._pe_dec, c.freq, kge,
        )
        return self._dropout(z, training)

    def encoder_forward(self, z: Tensor, training: bool = False) -> Tensor:
        """Unmasked self-attention stack; zero layers pass z through."""
        x = z
        for i in range(self.config.n_enc_layers):
            att = multi_head(x, x, self._attn_weights(f"enc.{i}.self"))
            x = self._sublayer(x, att, f"enc.{i}.ln1", training)
            x = self._sublayer(x, self._ffn(x, f"enc.{i}.ff"), f"enc.{i}.ln2", training)
        return x

    def decoder_forward(self, z: Tensor, memory: Tensor, training: bool = False) -> Tensor:
        """Causally masked self-attention, then cross-attention to memory."""
        x = z
        for i in range(self.config.n_dec_layers):
            att = multi_head(x, x, self._attn_weights(f"dec.{i}.self"), self._causal)
            x = self._sublayer(x, att, f"dec.{i}.ln1", training)
            cross = multi_head(x, memory, self._attn_weights(f"dec.{i}.cross"))
            x = self._sublayer(x, cross, f"dec.{i}.ln2", training)
            x = self._sublayer(x, self._ffn(x, f"dec.{i}.ff"), f"dec.{i}.ln3", training)
        return x

    def forecast(
        self,
        x_enc,
        marks_enc: np.ndarray,
        x_dec,
        marks_dec: np.ndarray,
        training: bool = False,
    ) -> Tensor:
        """All horizon steps in one pass: (..., H, M).

        ``x_dec`` is the scaffold -- label_len observed rows then H zeros.
        The placeholder region is pinned to zero here: the value embedding
        convolves along the decoder axis, so anything else in those rows
        would bleed across time and break scaffold-level causality.
        """
        c = self.config
        x_enc = x_enc if isinstance(x_enc, Tensor) else Tensor(x_enc, dtype=self.dtype)
        x_dec = x_dec if isinstance(x_dec, Tensor) else Tensor(x_dec, dtype=self.dtype)
        if np.any(x_dec.data[..., c.label_len:, :] != 0.0):
            scaffold = x_dec.data.copy()
            scaffold[..., c.label_len:, :] = 0.0
            x_dec = Tensor(scaffold, dtype=self.dtype)
        if x_enc.shape[-2:] != (c.lookback, c.channels):
            raise ShapeError(
                f"encoder input {x_enc.shape} does not match "
                f"(lookback={c.lookback}, channels={c.channels})"
            )
        if x_dec.shape[-2:] != (c.dec_len, c.channels):
            raise ShapeError(
                f"decoder scaffold {x_dec.shape} does not match "
                f"(label_len+horizon={c.dec_len}, channels={c.channels})"
            )
        memory = self.encoder_forward(self.embed_encoder(x_enc, marks_enc, training), training)
        dec = self.decoder_forward(self.embed_decoder(x_dec, marks_dec, training), memory, training)
        out = ad.add(ad.matmul(dec, self._params["head.w"]), self._params["head.b"])
        return ad.slice_axis(out, out.ndim - 2, c.label_len, c.dec_len)


def kge_parameter_delta(config: ModelConfig, num_nodes: int) -> int:
    """Extra parameters from enabling the graph embedding: W_l plus one W_p
    per distinct model sequence (encoder lookback and decoder scaffold)."""
    d = config.d_model
    return num_nodes * d + (config.lookback + config.dec_len) * d
