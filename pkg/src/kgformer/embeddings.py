"""Input embedding streams and their fusion.

Four streams produce (T, D) blocks that are summed into the model input:

* graph embedding -- learnable, derived from the binary adjacency matrix;
  the novel stream. ``W_l`` (V x D) mixes node identities through the
  adjacency, a reduction over the node axis collapses to a per-dimension
  vector, and the projection ``W_p`` (T x D) stretches it over the sequence
  so it aligns with the positional encoding. Both factors train by
  backpropagation; the adjacency itself stays fixed.
* sinusoidal positional encoding -- fixed.
* value embedding -- circular 1-d convolution lifting the M raw channels
  into model space (this stream carries the observations themselves).
* temporal embedding -- summed learnable lookup tables over calendar marks.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError


class Freq(enum.Enum):
    """Sampling granularity; decides which calendar marks exist."""

    HOURLY = "h"
    QUARTER_HOURLY = "15min"
    TEN_MINUTELY = "10min"

    @property
    def seconds(self) -> int:
        return {"h": 3600, "15min": 900, "10min": 600}[self.value]

    @property
    def mark_names(self) -> tuple[str, ...]:
        base = ("month", "day", "weekday", "hour")
        if self is Freq.HOURLY:
            return base
        return base + ("minute",)

    @property
    def minute_bucket(self) -> int | None:
        return {"h": None, "15min": 15, "10min": 10}[self.value]


# Lookup table sizes; marks index them directly (month 1..12, day 1..31,
# weekday 0..6, hour 0..23, minute bucket 0..5).
MARK_TABLE_SIZES = {"month": 13, "day": 32, "weekday": 7, "hour": 24, "minute": 6}


class Reduce(enum.Enum):
    SUM = "sum"
    MEAN = "mean"


@dataclass
class KgeParams:
    """Learnable factors of the graph embedding: W_l is V x D, W_p is T x D."""

    w_l: Tensor
    w_p: Tensor
    reduce: Reduce = Reduce.SUM


@dataclass
class EmbeddingConfig:
    d_model: int
    lookback: int
    channels: int
    freq: Freq = Freq.HOURLY
    use_kge: bool = True
    kernel_width: int = 3

    def __post_init__(self):
        if self.d_model <= 0 or self.d_model % 2 != 0:
            raise ConfigError(f"d_model must be positive and even, got {self.d_model}")
        if self.kernel_width % 2 == 0:
            raise ConfigError(f"kernel_width must be odd, got {self.kernel_width}")


def positional_encoding(length: int, d_model: int, dtype=np.float32) -> np.ndarray:
    """Fixed sinusoidal table: sin on even columns, cos on odd columns."""
    if d_model % 2 != 0:
        raise ConfigError(f"positional encoding needs even d_model, got {d_model}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    i2 = np.arange(0, d_model, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, i2 / d_model)
    pe = np.zeros((length, d_model), dtype=np.float64)
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe.astype(dtype)


def build_kge(adjacency: np.ndarray, params: KgeParams) -> Tensor:
    """Learnable graph embedding shaped like the positional table (T x D).

    H = A @ W_l mixes node rows along the graph structure; the node axis is
    reduced (sum by default, mean optional) and the result scales W_p
    elementwise. Differentiable in both factors; a zero adjacency yields a
    zero embedding and an exactly-zero W_l gradient.
    """
    v, d = params.w_l.shape
    if adjacency.shape != (v, v):
        raise ShapeError(
            f"adjacency {adjacency.shape} incompatible with W_l {params.w_l.shape}"
        )
    if params.w_p.shape[1] != d:
        raise ShapeError(
            f"W_p {params.w_p.shape} and W_l {params.w_l.shape} disagree on model dim"
        )
    a = Tensor(adjacency, dtype=params.w_l.dtype)
    h = ad.matmul(a, params.w_l)
    pooled = ad.sum_(h, axis=0)
    if params.reduce is Reduce.MEAN:
        pooled = ad.scale(pooled, 1.0 / v)
    return ad.mul(params.w_p, pooled)


def value_embedding(x: Tensor, kernel: Tensor) -> Tensor:
    """Circular convolution along time mapping M channels into model space."""
    return ad.conv1d_circular(x, kernel)


def temporal_embedding(marks: np.ndarray, tables: dict[str, Tensor], freq: Freq) -> Tensor:
    """Sum of per-feature lookup rows, one D-vector per timestamp.

    ``marks`` is an integer array (..., T, F) in the order of
    ``freq.mark_names``.
    """
    names = freq.mark_names
    if marks.shape[-1] != len(names):
        raise ShapeError(
            f"marks have {marks.shape[-1]} features, expected {len(names)} for {freq.value}"
        )
    out = None
    for f, name in enumerate(names):
        rows = ad.gather_rows(tables[name], marks[..., f])
        out = rows if out is None else ad.add(out, rows)
    return out


def compose_input(
    x: Tensor,
    marks: np.ndarray,
    kernel: Tensor,
    tables: dict[str, Tensor],
    pos_table: np.ndarray,
    freq: Freq,
    kge: Tensor | None = None,
) -> Tensor:
    """Fuse the streams into the model input Z (..., T, D).

    Z = conv(x) + positional + temporal (+ graph embedding when enabled).
    The raw observations enter through the value-embedding stream, which is
    the only shape-consistent way to include them alongside D-dimensional
    embeddings.
    """
    t = x.shape[-2]
    z = value_embedding(x, kernel)
    if z.shape[-2:] != (t, pos_table.shape[1]) or pos_table.shape[0] != t:
        raise ShapeError(
            f"embedding streams disagree: value {z.shape}, positional {pos_table.shape}"
        )
    z = ad.add(z, Tensor(pos_table, dtype=x.dtype))
    z = ad.add(z, temporal_embedding(marks, tables, freq))
    if kge is not None:
        if kge.shape != (t, pos_table.shape[1]):
            raise ShapeError(f"graph embedding {kge.shape} does not align with (T={t}, D)")
        z = ad.add(z, kge)
    return z
