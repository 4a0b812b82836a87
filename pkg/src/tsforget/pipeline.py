"""CSV I/O, chronological splits, standardization and sliding windows."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path

import numpy as np

CSV_HEADER = ("date", "values")
TIMESTAMP_FORMAT = "%Y-%m-%d %H:%M:%S"

DEFAULT_FRACTIONS = (0.7, 0.15, 0.15)


class CSVFormatError(ValueError):
    pass


@dataclass
class TimeSeries:
    timestamps: list[datetime]
    values: np.ndarray
    step_minutes: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ValueError("values must be one-dimensional")
        if len(self.timestamps) != len(self.values):
            raise ValueError(
                f"{len(self.timestamps)} timestamps but {len(self.values)} values")
        if len(self.values) < 1:
            raise ValueError("a series needs at least one point")
        if self.step_minutes < 1:
            raise ValueError("step_minutes must be positive")

    def __len__(self):
        return len(self.values)

    def __eq__(self, other):
        if not isinstance(other, TimeSeries):
            return NotImplemented
        return (self.step_minutes == other.step_minutes
                and self.timestamps == other.timestamps
                and np.array_equal(self.values, other.values))


def write_csv(series: TimeSeries, path) -> None:
    """Write ``date,values`` rows; floats carry 17 significant digits."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(CSV_HEADER) + "\n")
        for ts, v in zip(series.timestamps, series.values):
            fh.write(f"{ts.strftime(TIMESTAMP_FORMAT)},{float(v):.17g}\n")


def read_csv(path) -> TimeSeries:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    timestamps: list[datetime] = []
    values: list[float] = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
            raise CSVFormatError(f"{path}: expected header 'date,values', got {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise CSVFormatError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
            try:
                timestamps.append(datetime.strptime(row[0].strip(), TIMESTAMP_FORMAT))
            except ValueError as exc:
                raise CSVFormatError(f"{path}:{lineno}: bad timestamp {row[0]!r}") from exc
            try:
                v = float(row[1])
            except ValueError as exc:
                raise CSVFormatError(f"{path}:{lineno}: bad value {row[1]!r}") from exc
            if not math.isfinite(v):
                raise CSVFormatError(f"{path}:{lineno}: non-finite value {row[1]!r}")
            values.append(v)
    if not values:
        raise CSVFormatError(f"{path}: no data rows")

    if len(timestamps) == 1:
        step_minutes = 1
    else:
        deltas = {b - a for a, b in zip(timestamps, timestamps[1:])}
        if len(deltas) != 1:
            raise CSVFormatError(f"{path}: timestamps are not uniformly spaced")
        delta = deltas.pop()
        if delta.total_seconds() <= 0 or delta.total_seconds() % 60:
            raise CSVFormatError(f"{path}: spacing must be a positive whole number of minutes")
        step_minutes = int(delta.total_seconds() // 60)
    return TimeSeries(timestamps, np.array(values), step_minutes)


@dataclass(frozen=True)
class SplitIndices:
    train_end: int
    val_end: int
    n: int

    def region(self, name: str) -> tuple[int, int]:
        if name == "train":
            return 0, self.train_end
        if name == "val":
            return self.train_end, self.val_end
        if name == "test":
            return self.val_end, self.n
        raise ValueError(f"unknown region {name!r}")


@dataclass(frozen=True)
class WindowConfig:
    context_len: int = 256
    horizon: int = 128
    train_stride: int = 1
    eval_stride: int | None = None  # None means non-overlapping: stride = horizon

    def __post_init__(self):
        for name in ("context_len", "horizon", "train_stride"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.eval_stride is not None and self.eval_stride < 1:
            raise ValueError("eval_stride must be >= 1")

    @property
    def effective_eval_stride(self) -> int:
        return self.horizon if self.eval_stride is None else self.eval_stride


def split_series(series, fractions=DEFAULT_FRACTIONS, wcfg: WindowConfig | None = None) -> SplitIndices:
    """Floor the train and val fractions; the test region gets the remainder."""
    n = len(series)
    wcfg = wcfg or WindowConfig()
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or sum(fractions) > 1 + 1e-12:
        raise ValueError(f"bad split fractions {fractions}")
    min_n = wcfg.context_len + wcfg.horizon + 2
    if n < min_n:
        raise ValueError(
            f"series too short: {n} points, need at least {min_n} for "
            f"context {wcfg.context_len} + horizon {wcfg.horizon}")
    train_end = math.floor(fractions[0] * n)
    val_end = train_end + math.floor(fractions[1] * n)
    if not 0 < train_end < val_end < n:
        raise ValueError(f"degenerate split for n={n}: train_end={train_end}, val_end={val_end}")
    return SplitIndices(train_end, val_end, n)


@dataclass(frozen=True)
class Scaler:
    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise ValueError("scaler std must be positive")

    def transform(self, values):
        return (np.asarray(values, dtype=np.float64) - self.mean) / self.std

    def inverse_transform(self, values):
        return np.asarray(values, dtype=np.float64) * self.std + self.mean


def fit_scaler(values, indices=None) -> Scaler:
    """Mean and population std over ``values[indices]`` (a range or slice)."""
    if isinstance(values, TimeSeries):
        values = values.values
    values = np.asarray(values, dtype=np.float64)
    if indices is not None:
        if isinstance(indices, range):
            indices = slice(indices.start, indices.stop, indices.step)
        values = values[indices]
    if values.size == 0:
        raise ValueError("cannot fit a scaler on an empty range")
    mean = float(values.mean())
    std = float(values.std())
    if not std > 0:
        raise ValueError("constant series over the fit range (std = 0)")
    return Scaler(mean, std)


def transform(scaler: Scaler, values):
    return scaler.transform(values)


def inverse_transform(scaler: Scaler, values):
    return scaler.inverse_transform(values)


@dataclass
class WindowSet:
    contexts: np.ndarray
    targets: np.ndarray
    target_start_indices: np.ndarray

    def __post_init__(self):
        if self.contexts.shape[0] != self.targets.shape[0]:
            raise ValueError("contexts and targets have different row counts")

    def __len__(self):
        return self.contexts.shape[0]


def _gather(values: np.ndarray, starts: np.ndarray, context_len: int, horizon: int) -> WindowSet:
    ctx_idx = (starts - context_len)[:, None] + np.arange(context_len)
    tgt_idx = starts[:, None] + np.arange(horizon)
    return WindowSet(values[ctx_idx], values[tgt_idx], starts)


def make_train_windows(values, split: SplitIndices, wcfg: WindowConfig | None = None) -> WindowSet:
    """All windows whose context and target both sit inside the train region."""
    wcfg = wcfg or WindowConfig()
    values = np.asarray(getattr(values, "values", values), dtype=np.float64)
    span = wcfg.context_len + wcfg.horizon
    last_start = split.train_end - span
    if last_start < 0:
        raise ValueError(
            f"no training window fits: train region has {split.train_end} points, need {span}")
    starts = np.arange(0, last_start + 1, wcfg.train_stride) + wcfg.context_len
    return _gather(values, starts, wcfg.context_len, wcfg.horizon)


def make_eval_windows(values, split: SplitIndices, region: str = "test",
                      wcfg: WindowConfig | None = None) -> WindowSet:
    """Non-overlapping forecast targets tiled from the start of ``region``.

    Targets stay inside the region; contexts may reach back into earlier
    regions.
    """
    wcfg = wcfg or WindowConfig()
    if region not in ("val", "test"):
        raise ValueError(f"eval region must be 'val' or 'test', got {region!r}")
    values = np.asarray(getattr(values, "values", values), dtype=np.float64)
    lo, hi = split.region(region)
    if lo < wcfg.context_len:
        raise ValueError(f"{region} region starts at {lo}, before a full context of {wcfg.context_len}")
    if hi - lo < wcfg.horizon:
        raise ValueError(f"no {region} window fits: region has {hi - lo} points, horizon is {wcfg.horizon}")
    starts = np.arange(lo, hi - wcfg.horizon + 1, wcfg.effective_eval_stride)
    return _gather(values, starts, wcfg.context_len, wcfg.horizon)
