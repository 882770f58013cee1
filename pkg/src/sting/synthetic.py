"""Seeded synthetic series for desk-scale experiments."""

from __future__ import annotations

from typing import Sequence, Union

import numpy as np

from sting.data import DataError, RawSeries


def gen_sinusoid_mix(
    n_windows: int,
    T: int,
    D: int,
    noise_sd: float = 0.05,
    seed: int = 0,
    period_range: tuple[float, float] = (8.0, 32.0),
    mixing: float = 0.3,
    irregular: bool = False,
) -> list[RawSeries]:
    """Mixed sinusoids, one fully observed series per window.

    Each latent feature ``d`` is ``sin(2 pi t / P_d + phi)``. Periods ``P_d``
    and the mixing matrix ``I + mixing * N(0, 1)`` (off-diagonal only) are
    drawn once per dataset; phases are drawn per window. ``mixing=0`` keeps
    the features unmixed.

    With ``irregular=True`` timestamps are a sorted random subset of a grid
    twice as long, each shifted by a jitter in ``[0, 0.5)``.
    """
    if T < 8:
        raise DataError("T must be >= 8")
    if D < 1:
        raise DataError("D must be >= 1")
    if n_windows < 0 or noise_sd < 0:
        raise DataError("n_windows and noise_sd must be non-negative")
    rng = np.random.default_rng(seed)
    lo, hi = period_range
    periods = rng.uniform(lo, hi, size=D)
    A = np.eye(D)
    if D > 1 and mixing:
        off = rng.standard_normal((D, D)) * mixing
        np.fill_diagonal(off, 0.0)
        A = A + off
    names = [f"x{d}" for d in range(D)]
    out = []
    for _ in range(n_windows):
        if irregular:
            picks = np.sort(rng.choice(2 * T, size=T, replace=False)).astype(np.float64)
            ts = picks + rng.uniform(0.0, 0.5, size=T)
        else:
            ts = np.arange(T, dtype=np.float64)
        phase = rng.uniform(0.0, 2 * np.pi, size=D)
        latent = np.sin(2 * np.pi * ts[:, None] / periods[None, :] + phase[None, :])
        values = latent @ A.T
        if noise_sd:
            values = values + rng.normal(0.0, noise_sd, size=values.shape)
        out.append(RawSeries(ts, values, names))
    return out


def corrupt_mcar(
    series: Union[RawSeries, Sequence[RawSeries]], missing_ratio: float, seed: int = 0
):
    """Drop each cell independently with probability ``missing_ratio``.

    Accepts one series or a list; a list is corrupted with a single stream.
    """
    if not 0.0 <= missing_ratio < 1.0:
        raise DataError(f"missing_ratio must lie in [0, 1), got {missing_ratio}")
    rng = np.random.default_rng(seed)

    def one(s: RawSeries) -> RawSeries:
        drop = rng.random(s.values.shape) < missing_ratio
        return RawSeries(s.timestamps.copy(), np.where(drop, np.nan, s.values), s.feature_names)

    if isinstance(series, RawSeries):
        return one(series)
    return [one(s) for s in series]


def concat_series(series: Sequence[RawSeries]) -> RawSeries:
    """Join windows end to end, shifting timestamps so they stay increasing."""
    stamps, values, offset = [], [], 0.0
    for s in series:
        ts = s.timestamps - s.timestamps[0] + offset
        stamps.append(ts)
        values.append(s.values)
        gap = np.median(np.diff(s.timestamps)) if s.n_steps > 1 else 1.0
        offset = ts[-1] + gap
    return RawSeries(np.concatenate(stamps), np.vstack(values), series[0].feature_names)
