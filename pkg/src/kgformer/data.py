"""Benchmark CSV ingestion, chronological splitting, scaling and windowing.

Input files follow the public long-horizon benchmark layout: a header row,
first column ``date`` (``YYYY-MM-DD HH:MM[:SS]``), remaining columns numeric
features at a fixed sampling frequency.
"""

from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass

import numpy as np

from .embeddings import Freq
from .errors import ConfigError, LoadError

DATE_FORMATS = ("%Y-%m-%d %H:%M:%S", "%Y-%m-%d %H:%M")

_SECONDS_TO_FREQ = {f.seconds: f for f in Freq}


@dataclass
class RawSeries:
    """Fixed-frequency multivariate series with strictly increasing timestamps."""

    timestamps: list[dt.datetime]
    values: np.ndarray  # (T, M) float32
    column_names: list[str]
    freq: Freq

    def __post_init__(self):
        if len(self.timestamps) != self.values.shape[0]:
            raise LoadError(
                f"{len(self.timestamps)} timestamps vs {self.values.shape[0]} value rows"
            )

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    def slice(self, start: int, stop: int) -> "RawSeries":
        return RawSeries(
            timestamps=self.timestamps[start:stop],
            values=self.values[start:stop],
            column_names=self.column_names,
            freq=self.freq,
        )


def load_csv(path: str, expected_freq: Freq | None = None) -> RawSeries:
    """Load and validate a benchmark CSV.

    The frequency is inferred from the first timestamp delta (and must be a
    supported granularity); every subsequent delta is checked against it.
    Errors carry the 1-based data row number.
    """
    with open(path, "r", encoding="utf-8-sig", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise LoadError("empty file") from None
        if not header or header[0].strip().lower() != "date":
            raise LoadError(f"first column must be 'date', got {header[:1]}")
        columns = [c.strip() for c in header[1:]]
        if not columns:
            raise LoadError("no feature columns")

        timestamps: list[dt.datetime] = []
        rows: list[list[float]] = []
        for rownum, rec in enumerate(reader, start=1):
            if not rec:
                continue
            if len(rec) != len(columns) + 1:
                raise LoadError(
                    f"expected {len(columns) + 1} cells, got {len(rec)}", rownum
                )
            timestamps.append(_parse_date(rec[0], rownum))
            try:
                rows.append([float(c) for c in rec[1:]])
            except ValueError as exc:
                raise LoadError(f"unparseable numeric cell: {exc}", rownum) from None

    if len(rows) < 2:
        raise LoadError(f"need at least 2 rows, got {len(rows)}")

    delta = (timestamps[1] - timestamps[0]).total_seconds()
    if delta <= 0:
        raise LoadError("timestamps not strictly increasing", 2)
    freq = _SECONDS_TO_FREQ.get(int(delta))
    if freq is None:
        supported = ", ".join(f"{f.value} ({f.seconds}s)" for f in Freq)
        raise LoadError(f"unsupported sampling interval {delta}s; supported: {supported}", 2)
    if expected_freq is not None and freq is not expected_freq:
        raise LoadError(f"expected {expected_freq.value} data, file is {freq.value}", 2)
    for i in range(2, len(timestamps)):
        d = (timestamps[i] - timestamps[i - 1]).total_seconds()
        if d <= 0:
            raise LoadError("timestamps not strictly increasing", i + 1)
        if int(d) != freq.seconds:
            raise LoadError(
                f"frequency violation: delta {d}s, expected {freq.seconds}s", i + 1
            )

    values = np.asarray(rows, dtype=np.float32)
    if not np.isfinite(values).all():
        bad = int(np.argwhere(~np.isfinite(values))[0][0]) + 1
        raise LoadError("non-finite value", bad)
    return RawSeries(timestamps=timestamps, values=values, column_names=columns, freq=freq)


def _parse_date(cell: str, rownum: int) -> dt.datetime:
    cell = cell.strip()
    for fmt in DATE_FORMATS:
        try:
            return dt.datetime.strptime(cell, fmt)
        except ValueError:
            continue
    raise LoadError(f"unparseable timestamp '{cell}'", rownum)


def write_csv(path: str, series: RawSeries) -> None:
    """Inverse of load_csv; float formatting is shortest-round-trip, so the
    bytes are identical for identical data."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["date"] + series.column_names)
        for ts, row in zip(series.timestamps, series.values):
            writer.writerow([ts.strftime("%Y-%m-%d %H:%M:%S")] + [repr(float(x)) for x in row])


def time_features(ts: dt.datetime, freq: Freq) -> tuple[int, ...]:
    """Integer calendar marks: (month 1-12, day 1-31, weekday Mon=0, hour,
    [minute bucket])."""
    base = (ts.month, ts.day, ts.weekday(), ts.hour)
    bucket = freq.minute_bucket
    if bucket is None:
        return base
    return base + (ts.minute // bucket,)


def marks_array(timestamps: list[dt.datetime], freq: Freq) -> np.ndarray:
    """(T, F) int array of calendar marks for a timestamp list."""
    return np.asarray([time_features(t, freq) for t in timestamps], dtype=np.int64)


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitScheme:
    """Chronological partitioning rule.

    ``ratio`` carves fractional row counts; ``ett_months`` uses fixed
    30-day-month row budgets (the convention for the electric-transformer
    benchmark family).
    """

    kind: str
    params: tuple[float, ...]

    @staticmethod
    def ratio(train: float = 0.7, val: float = 0.1, test: float = 0.2) -> "SplitScheme":
        if not np.isclose(train + val + test, 1.0):
            raise ConfigError(f"ratios must sum to 1, got {train}+{val}+{test}")
        return SplitScheme("ratio", (train, val, test))

    @staticmethod
    def ett_months(train: int = 12, val: int = 4, test: int = 4) -> "SplitScheme":
        return SplitScheme("ett_months", (float(train), float(val), float(test)))


def default_scheme_for(path_or_name: str) -> SplitScheme:
    name = str(path_or_name).lower()
    return SplitScheme.ett_months() if "ett" in name else SplitScheme.ratio()


def split(
    series: RawSeries, scheme: SplitScheme, lookback: int
) -> tuple[RawSeries, RawSeries, RawSeries]:
    """Contiguous train/val/test partitions.

    Val and test are extended by ``lookback`` context rows from the
    preceding partition so their first targets sit exactly at the boundary;
    no window's target ever crosses into the next partition.
    """
    t = len(series)
    if scheme.kind == "ratio":
        n_train = int(t * scheme.params[0])
        n_val = int(t * scheme.params[1])
        n_test = t - n_train - n_val
    elif scheme.kind == "ett_months":
        rows_per_month = 30 * 24 * 3600 // series.freq.seconds
        n_train = int(scheme.params[0]) * rows_per_month
        n_val = int(scheme.params[1]) * rows_per_month
        n_test = int(scheme.params[2]) * rows_per_month
        if n_train + n_val + n_test > t:
            raise ConfigError(
                f"series has {t} rows; month scheme needs {n_train + n_val + n_test}"
            )
    else:
        raise ConfigError(f"unknown split scheme '{scheme.kind}'")

    for name, n in (("train", n_train), ("val", n_val), ("test", n_test)):
        if n <= 0:
            raise ConfigError(f"{name} partition is empty (T={t}, scheme={scheme.kind})")
    if n_train < lookback:
        raise ConfigError(
            f"train partition ({n_train} rows) shorter than lookback {lookback}"
        )

    train = series.slice(0, n_train)
    val = series.slice(n_train - lookback, n_train + n_val)
    test = series.slice(n_train + n_val - lookback, n_train + n_val + n_test)
    return train, val, test


# ---------------------------------------------------------------------------
# Scaling
# ---------------------------------------------------------------------------


@dataclass
class StandardScaler:
    """Per-channel z-scoring with the std floored at eps.

    Fit on the training partition only; metrics are reported on this scale.
    """

    mean: np.ndarray
    std: np.ndarray
    eps: float = 1e-8

    @staticmethod
    def fit(values: np.ndarray, eps: float = 1e-8) -> "StandardScaler":
        mean = values.mean(axis=0)
        std = np.maximum(values.std(axis=0), eps)
        return StandardScaler(mean=mean.astype(np.float64), std=std.astype(np.float64), eps=eps)

    def apply(self, values: np.ndarray) -> np.ndarray:
        return ((values - self.mean) / self.std).astype(values.dtype)

    def invert(self, values: np.ndarray) -> np.ndarray:
        return (values * self.std + self.mean).astype(values.dtype)


# ---------------------------------------------------------------------------
# Windowing
# ---------------------------------------------------------------------------


@dataclass
class WindowSample:
    """One supervised example.

    ``x_enc`` holds the L rows immediately preceding the target block;
    ``x_dec`` repeats the last label_len of them and zeroes the horizon.
    """

    x_enc: np.ndarray
    x_dec: np.ndarray
    marks_enc: np.ndarray
    marks_dec: np.ndarray
    y: np.ndarray


class WindowDataset:
    """Stride-1 sliding windows over one partition, materialized on demand."""

    def __init__(self, partition: RawSeries, lookback: int, label_len: int, horizon: int):
        t = len(partition)
        if label_len > lookback:
            raise ConfigError(f"label_len {label_len} exceeds lookback {lookback}")
        if t < lookback + horizon:
            raise ConfigError(
                f"partition has {t} rows, needs at least lookback+horizon={lookback + horizon}"
            )
        self.values = partition.values
        self.marks = marks_array(partition.timestamps, partition.freq)
        self.timestamps = partition.timestamps
        self.lookback = lookback
        self.label_len = label_len
        self.horizon = horizon
        self.n = t - lookback - horizon + 1

    def __len__(self) -> int:
        return self.n

    def __getitem__(self, i: int) -> WindowSample:
        if not 0 <= i < self.n:
            raise IndexError(i)
        xe, xd, me, md, y = self.batch(np.asarray([i]))
        return WindowSample(x_enc=xe[0], x_dec=xd[0], marks_enc=me[0], marks_dec=md[0], y=y[0])

    def batch(self, idx: np.ndarray):
        """Assemble (B, ., .) arrays for the window start indices ``idx``."""
        L, lab, h = self.lookback, self.label_len, self.horizon
        starts = np.asarray(idx)[:, None]
        enc_rows = starts + np.arange(L)[None, :]
        dec_rows = starts + (L - lab) + np.arange(lab + h)[None, :]
        y_rows = starts + L + np.arange(h)[None, :]
        x_enc = self.values[enc_rows]
        x_dec = self.values[dec_rows].copy()
        x_dec[:, lab:, :] = 0.0
        return (
            x_enc,
            x_dec,
            self.marks[enc_rows],
            self.marks[dec_rows],
            self.values[y_rows],
        )

    def target_timestamps(self, i: int) -> list[dt.datetime]:
        start = i + self.lookback
        return self.timestamps[start : start + self.horizon]


def make_windows(
    partition: RawSeries, lookback: int, label_len: int, horizon: int
) -> list[WindowSample]:
    """All T-L-H+1 windows as a list (see WindowDataset for lazy batches)."""
    ds = WindowDataset(partition, lookback, label_len, horizon)
    return [ds[i] for i in range(len(ds))]


def scaled_partitions(
    series: RawSeries, scheme: SplitScheme, lookback: int
) -> tuple[StandardScaler, RawSeries, RawSeries, RawSeries]:
    """Split, fit the scaler on train rows only, and z-score all partitions."""
    train, val, test = split(series, scheme, lookback)
    scaler = StandardScaler.fit(train.values)

    def scaled(part: RawSeries) -> RawSeries:
        return RawSeries(
            timestamps=part.timestamps,
            values=scaler.apply(part.values),
            column_names=part.column_names,
            freq=part.freq,
        )

    return scaler, scaled(train), scaled(val), scaled(test)
