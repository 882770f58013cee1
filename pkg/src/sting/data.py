"""Raw series ingestion, input matrices, normalization, windowing and holdouts.

A window carries the four generator inputs: ``x_bar`` (values with zeros at
missing cells), ``mask``, ``delta`` (time since last observation) and the
timestamps.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from sting import kernels

MISSING_TOKENS = {"", "nan", "NaN", "NAN"}


class DataError(ValueError):
    pass


@dataclass
class RawSeries:
    """T rows of D features; ``values`` holds NaN where a cell is absent."""

    timestamps: np.ndarray
    values: np.ndarray
    feature_names: Optional[list[str]] = None

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64).reshape(-1)
        if self.feature_names is None:
            shape = np.shape(self.values)
            n = shape[1] if len(shape) == 2 else 0
            self.feature_names = [f"x{d}" for d in range(n)]
        self.feature_names = list(self.feature_names)
        if len(self.feature_names) < 1:
            raise DataError("a series needs at least one feature")
        values = np.asarray(self.values, dtype=np.float64)
        expected = (len(self.timestamps), len(self.feature_names))
        if values.size != expected[0] * expected[1]:
            raise DataError(f"values of shape {values.shape} do not fit {expected}")
        self.values = values.reshape(expected)
        if np.any(np.diff(self.timestamps) < 0):
            raise DataError("timestamps must be sorted ascending")

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return self.values.shape[1]


@dataclass
class EvalTargets:
    """Held-out cells: a boolean position mask and the true values there."""

    positions: np.ndarray
    values: np.ndarray

    @property
    def count(self) -> int:
        return int(self.positions.sum())


@dataclass
class TimeSeriesWindow:
    x_bar: np.ndarray
    mask: np.ndarray
    delta: np.ndarray
    timestamps: np.ndarray
    delta_backward: Optional[np.ndarray] = None
    padded_rows: int = 0
    feature_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.delta_backward is None:
            self.delta_backward = build_delta_backward(self.timestamps, self.mask)

    @property
    def shape(self) -> tuple[int, int]:
        return self.x_bar.shape

    @property
    def values(self) -> np.ndarray:
        """Values with NaN at missing cells."""
        return np.where(self.mask > 0, self.x_bar, np.nan)


def build_mask(raw: RawSeries) -> np.ndarray:
    """1 where a value is present, 0 where absent."""
    return (~np.isnan(raw.values)).astype(np.float64)


def build_delta(timestamps: np.ndarray, mask: np.ndarray) -> np.ndarray:
    s = np.asarray(timestamps, dtype=np.float64).reshape(-1)
    m = np.asarray(mask)
    if m.ndim != 2 or m.shape[0] != s.shape[0]:
        raise DataError(f"mask shape {m.shape} does not match {s.shape[0]} timestamps")
    if np.any(np.diff(s) < 0):
        raise DataError("timestamps must be non-decreasing")
    return kernels.delta_recurrence(s, (m > 0).astype(np.uint8))


def build_delta_backward(timestamps: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Lag matrix of the time-reversed sequence, returned in original order.

    Row t holds the time until the next observation after t (0 on the last
    row), which is what the backward generator sees at its step for t.
    """
    s = np.asarray(timestamps, dtype=np.float64).reshape(-1)
    m = np.asarray(mask)
    rev = build_delta(-s[::-1], m[::-1])
    return np.ascontiguousarray(rev[::-1])


@dataclass
class NormalizationStats:
    minimum: np.ndarray
    maximum: np.ndarray
    eps: float = 1e-8
    feature_names: list[str] = field(default_factory=list)

    @property
    def degenerate(self) -> np.ndarray:
        return self.maximum == self.minimum

    @property
    def scale(self) -> np.ndarray:
        return self.maximum - self.minimum + self.eps

    def to_dict(self) -> dict:
        return {
            "min": self.minimum.tolist(),
            "max": self.maximum.tolist(),
            "eps": self.eps,
            "feature_names": list(self.feature_names),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(
            np.asarray(d["min"], dtype=np.float64),
            np.asarray(d["max"], dtype=np.float64),
            float(d["eps"]),
            list(d.get("feature_names", [])),
        )


SeriesLike = Union[RawSeries, TimeSeriesWindow, Sequence[Union[RawSeries, TimeSeriesWindow]]]


def _stack_observed(data: SeriesLike):
    items = [data] if isinstance(data, (RawSeries, TimeSeriesWindow)) else list(data)
    if not items:
        raise DataError("no data to fit normalization on")
    vals, names = [], items[0].feature_names
    for it in items:
        v = it.values if isinstance(it, RawSeries) else it.values
        vals.append(v)
    return np.concatenate(vals, axis=0), names


def fit_normalization(data: SeriesLike, eps: float = 1e-8) -> NormalizationStats:
    """Per-feature min/max over observed cells only."""
    values, names = _stack_observed(data)
    observed = ~np.isnan(values)
    empty = np.flatnonzero(~observed.any(axis=0))
    if empty.size:
        label = names[empty[0]] if names else str(empty[0])
        raise DataError(f"feature {label!r} has no observed values")
    return NormalizationStats(
        np.nanmin(values, axis=0), np.nanmax(values, axis=0), eps, list(names)
    )


def normalize_array(values: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    if values.shape[-1] != stats.minimum.shape[0]:
        raise DataError(
            f"{values.shape[-1]} features but stats fitted on {stats.minimum.shape[0]}"
        )
    scale = np.where(stats.degenerate, 1.0, stats.scale)
    out = (values - stats.minimum) / scale
    return np.where(stats.degenerate, 0.0 * values, out)


def denormalize_array(values: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    if values.shape[-1] != stats.minimum.shape[0]:
        raise DataError(
            f"{values.shape[-1]} features but stats fitted on {stats.minimum.shape[0]}"
        )
    out = values * stats.scale + stats.minimum
    return np.where(stats.degenerate, stats.minimum + 0.0 * values, out)


def normalize(window: TimeSeriesWindow, stats: NormalizationStats) -> TimeSeriesWindow:
    x = np.where(window.mask > 0, normalize_array(window.x_bar, stats), 0.0)
    return replace(window, x_bar=x)


def denormalize(window: TimeSeriesWindow, stats: NormalizationStats) -> TimeSeriesWindow:
    x = np.where(window.mask > 0, denormalize_array(window.x_bar, stats), 0.0)
    return replace(window, x_bar=x)


def window_from_arrays(
    timestamps: np.ndarray,
    values: np.ndarray,
    feature_names: Optional[list[str]] = None,
    padded_rows: int = 0,
) -> TimeSeriesWindow:
    """Build a window from raw values (NaN = missing)."""
    values = np.asarray(values, dtype=np.float64)
    mask = (~np.isnan(values)).astype(np.float64)
    return TimeSeriesWindow(
        x_bar=np.where(mask > 0, values, 0.0),
        mask=mask,
        delta=build_delta(timestamps, mask),
        timestamps=np.asarray(timestamps, dtype=np.float64),
        padded_rows=padded_rows,
        feature_names=list(feature_names or []),
    )


def make_windows(raw: RawSeries, length: int = 48, stride: int = 48) -> list[TimeSeriesWindow]:
    """Cut ``raw`` into fixed-length windows.

    A short final window is padded with missing rows (``padded_rows`` records
    how many); padded timestamps continue at the last observed spacing.
    """
    if length < 2:
        raise DataError("window length must be >= 2")
    if stride < 1:
        raise DataError("stride must be >= 1")
    T = raw.n_steps
    windows = []
    start = 0
    while start < T:
        stop = min(start + length, T)
        ts = raw.timestamps[start:stop]
        vals = raw.values[start:stop]
        pad = length - (stop - start)
        if pad:
            step = ts[-1] - ts[-2] if len(ts) > 1 else 1.0
            step = step if step > 0 else 1.0
            ts = np.concatenate([ts, ts[-1] + step * np.arange(1, pad + 1)])
            vals = np.vstack([vals, np.full((pad, raw.n_features), np.nan)])
        windows.append(window_from_arrays(ts, vals, raw.feature_names, pad))
        if start + length >= T:
            break
        start += stride
    return windows


def holdout_mask(
    window: TimeSeriesWindow, ratio: float, rng_seed: Union[int, np.random.Generator]
) -> tuple[TimeSeriesWindow, EvalTargets]:
    """Hide ``floor(ratio * #observed)`` observed cells, chosen uniformly."""
    (train,), (targets,) = holdout_windows([window], ratio, rng_seed)
    return train, targets


def holdout_windows(
    windows: Sequence[TimeSeriesWindow],
    ratio: float,
    rng_seed: Union[int, np.random.Generator],
) -> tuple[list[TimeSeriesWindow], list[EvalTargets]]:
    """Global holdout: the sample is drawn over the observed cells of all windows."""
    if not 0.0 <= ratio < 1.0:
        raise DataError(f"holdout ratio must lie in [0, 1), got {ratio}")
    rng = np.random.default_rng(rng_seed)
    masks = np.stack([w.mask for w in windows]) if windows else np.zeros((0, 1, 1))
    observed = np.flatnonzero(masks.reshape(-1) > 0)
    n_hold = math.floor(ratio * observed.size)
    chosen = np.sort(rng.choice(observed, size=n_hold, replace=False)) if n_hold else []
    held = np.zeros(masks.size, dtype=bool)
    held[chosen] = True
    held = held.reshape(masks.shape)

    trains, targets = [], []
    for w, pos in zip(windows, held):
        truth = np.where(pos, w.x_bar, 0.0)
        if not pos.any():
            trains.append(w)
        else:
            mask = np.where(pos, 0.0, w.mask)
            trains.append(
                replace(
                    w,
                    x_bar=np.where(pos, 0.0, w.x_bar),
                    mask=mask,
                    delta=build_delta(w.timestamps, mask),
                    delta_backward=build_delta_backward(w.timestamps, mask),
                )
            )
        targets.append(EvalTargets(pos, truth))
    return trains, targets


def restore_targets(window: TimeSeriesWindow, targets: EvalTargets) -> TimeSeriesWindow:
    """Undo :func:`holdout_mask`."""
    mask = np.where(targets.positions, 1.0, window.mask)
    return replace(
        window,
        x_bar=np.where(targets.positions, targets.values, window.x_bar),
        mask=mask,
        delta=build_delta(window.timestamps, mask),
        delta_backward=build_delta_backward(window.timestamps, mask),
    )


def _parse_cell(token: str, lineno: int, column: str) -> float:
    token = token.strip()
    if token in MISSING_TOKENS:
        return math.nan
    try:
        return float(token)
    except ValueError:
        raise DataError(
            f"line {lineno}: non-numeric value {token!r} in column {column!r}"
        ) from None


def load_csv(path: Union[str, Path]) -> RawSeries:
    """Read ``timestamp,feature...`` rows; empty cells and ``NaN`` are missing."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, expected a header row") from None
        if len(header) < 2:
            raise DataError(f"{path}: header needs a timestamp and at least one feature")
        names = [h.strip() for h in header[1:]]
        stamps, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(
                    f"line {lineno}: expected {len(header)} fields, got {len(row)}"
                )
            ts = _parse_cell(row[0], lineno, header[0])
            if math.isnan(ts):
                raise DataError(f"line {lineno}: missing timestamp")
            if stamps and ts < stamps[-1]:
                raise DataError(f"line {lineno}: timestamps are not sorted ascending")
            stamps.append(ts)
            rows.append([_parse_cell(c, lineno, n) for c, n in zip(row[1:], names)])
    values = np.array(rows, dtype=np.float64).reshape(len(rows), len(names))
    return RawSeries(np.array(stamps), values, names)


def _fmt(v: float) -> str:
    return "" if math.isnan(v) else repr(float(v))


def write_csv(path: Union[str, Path], raw: RawSeries, timestamp_name: str = "t") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([timestamp_name, *raw.feature_names])
        for ts, row in zip(raw.timestamps, raw.values):
            w.writerow([repr(float(ts)), *(_fmt(v) for v in row)])


def dump_window(path: Union[str, Path], window: TimeSeriesWindow) -> None:
    """Debug dump: ``T,D`` header, then values, mask and delta blocks row-major."""
    T, D = window.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["T", "D"])
        w.writerow([T, D])
        for name, block in (
            ("values", window.values),
            ("mask", window.mask),
            ("delta", window.delta),
        ):
            w.writerow([name])
            for row in block:
                w.writerow([_fmt(v) for v in row])


def load_window_dump(path: Union[str, Path]) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    T, D = int(rows[1][0]), int(rows[1][1])
    blocks, i = {}, 2
    while i < len(rows):
        name = rows[i][0]
        body = rows[i + 1 : i + 1 + T]
        blocks[name] = np.array(
            [[math.nan if c == "" else float(c) for c in r] for r in body]
        ).reshape(T, D)
        i += T + 1
    return blocks


def stack_windows(windows: Sequence[TimeSeriesWindow]) -> dict[str, np.ndarray]:
    """Batch arrays ``(N, T, D)`` for the model."""
    if not windows:
        raise DataError("no windows to stack")
    return {
        "x_bar": np.stack([w.x_bar for w in windows]),
        "mask": np.stack([w.mask for w in windows]),
        "delta": np.stack([w.delta for w in windows]),
        "delta_backward": np.stack([w.delta_backward for w in windows]),
    }
