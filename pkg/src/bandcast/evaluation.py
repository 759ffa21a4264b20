"""Interval and distribution metrics with block-bootstrap confidence bands.

All functions are pure. Coverage uses inclusive bounds (a collapsed
point interval can still cover) and infinite bounds count as covering;
the trivial always-(-inf, inf) method therefore scores coverage 1 and
width +inf, which is exactly why width is reported next to coverage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .models import QuantileSetForecast

__all__ = [
    "MetricSeries",
    "BootstrapCI",
    "AverageWidth",
    "empirical_coverage",
    "average_width",
    "crps_riemann",
    "default_crps_grid",
    "block_bootstrap_ci",
]


@dataclass(frozen=True)
class MetricSeries:
    """Per-step metric values for one (method, hour, level, period) cell."""

    values: np.ndarray
    method: str = ""
    hour: int = -1
    level: float = float("nan")
    period: str = ""
    metric: str = ""

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).reshape(-1)
        if values.shape[0] == 0:
            raise ValueError("metric series must be non-empty")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return len(self.values)

    @property
    def mean(self) -> float:
        return float(self.values.mean())


@dataclass(frozen=True)
class BootstrapCI:
    point: float
    lo: float
    hi: float
    n_boot: int
    block_len: int

    @property
    def point_inside(self) -> bool:
        """False only under resampling noise (flag, not an error)."""
        return self.lo <= self.point <= self.hi


def _bounds_of(interval) -> tuple[float, float]:
    if hasattr(interval, "lower"):
        return float(interval.lower), float(interval.upper)
    lo, hi = interval
    return float(lo), float(hi)


def empirical_coverage(intervals, y) -> float:
    """Mean of 1{lower_t <= y_t <= upper_t}; bounds inclusive."""
    intervals = list(intervals)
    y = np.asarray(y, dtype=float).reshape(-1)
    if len(intervals) != y.shape[0]:
        raise ValueError(
            f"{len(intervals)} intervals vs {y.shape[0]} observations"
        )
    if len(intervals) == 0:
        raise ValueError("need at least one interval")
    bounds = np.array([_bounds_of(itv) for itv in intervals])
    hits = (bounds[:, 0] <= y) & (y <= bounds[:, 1])
    return float(hits.mean())


@dataclass(frozen=True)
class AverageWidth:
    """Mean interval width, with the infinite intervals accounted separately.

    `value` is +inf as soon as one interval is infinite; `finite_mean`
    then still reports the mean over the finite subset (NaN if empty).
    """

    value: float
    finite_mean: float
    n_infinite: int

    @property
    def has_infinite(self) -> bool:
        return self.n_infinite > 0

    def __float__(self) -> float:
        return self.value


def average_width(intervals) -> AverageWidth:
    intervals = list(intervals)
    if not intervals:
        raise ValueError("need at least one interval")
    widths = np.array([hi - lo for lo, hi in map(_bounds_of, intervals)])
    infinite = ~np.isfinite(widths)
    n_inf = int(infinite.sum())
    finite = widths[~infinite]
    finite_mean = float(finite.mean()) if finite.size else math.nan
    value = math.inf if n_inf else float(widths.mean())
    return AverageWidth(value=value, finite_mean=finite_mean, n_infinite=n_inf)


def default_crps_grid() -> np.ndarray:
    """Quantile levels 0.01 .. 0.99 in steps of 0.01."""
    return np.round(np.arange(1, 100) / 100.0, 2)


def crps_riemann(forecast: QuantileSetForecast, y: float) -> float:
    """CRPS as a Riemann sum of pinball losses over the forecast's grid.

    Normalized as 2 * mean_i pinball_{level_i}(y - value_i), so a
    constant forecast q scores |y - q| in the dense-grid limit.
    """
    levels = np.asarray(forecast.levels)
    if levels.shape[0] < 3:
        raise ValueError("need at least 3 quantile levels for the Riemann sum")
    values = np.asarray(forecast.values)
    r = float(y) - values
    losses = np.where(r >= 0.0, levels * r, (levels - 1.0) * r)
    return float(2.0 * losses.mean())


def block_bootstrap_ci(series, block_len: int = 30, n_boot: int = 500,
                       levels: tuple[float, float] = (0.05, 0.95),
                       seed: int = 0) -> BootstrapCI:
    """Non-overlapping moving-block bootstrap CI for the series mean.

    The series is cut into consecutive blocks of `block_len` (last
    partial block kept); each resample draws blocks with replacement,
    concatenates to at least the original length, truncates, and takes
    the mean. Deterministic given `seed`.
    """
    if isinstance(series, MetricSeries):
        values = series.values
    else:
        values = np.asarray(series, dtype=float).reshape(-1)
    n = values.shape[0]
    if n == 0:
        raise ValueError("empty series")
    if block_len < 1:
        raise ConfigError("block_len must be >= 1")
    if block_len > n:
        raise ConfigError(f"block_len {block_len} exceeds series length {n}")
    if n_boot < 1:
        raise ConfigError("n_boot must be >= 1")
    lo_q, hi_q = levels
    blocks = [values[i:i + block_len] for i in range(0, n, block_len)]
    n_blocks = len(blocks)
    # enough draws to reach length n even if every draw were the
    # (possibly short) partial block
    draws_per_boot = math.ceil(n / min(len(b) for b in blocks))
    rng = np.random.default_rng(seed)
    means = np.empty(n_boot)
    for b in range(n_boot):
        idx = rng.integers(0, n_blocks, size=draws_per_boot)
        sample = np.concatenate([blocks[i] for i in idx])[:n]
        means[b] = sample.mean()
    lo, hi = np.quantile(means, [lo_q, hi_q])
    return BootstrapCI(
        point=float(values.mean()), lo=float(lo), hi=float(hi),
        n_boot=int(n_boot), block_len=int(block_len),
    )
