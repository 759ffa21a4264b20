"""Base quantile forecasters behind one contract, plus crossing repair.

A forecaster is anything with a `level` attribute (the quantile it
targets), an `n_features` property, and `predict(X) -> ndarray`. Two
implementations live here: linear/Lasso quantile regression
(:mod:`bandcast.models.linear`) and gradient-boosted quantile trees
(:mod:`bandcast.models.boosting`).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence, runtime_checkable

import numpy as np

__all__ = [
    "QuantileForecaster",
    "QuantileSetForecast",
    "check_level",
    "pinball_loss",
    "reorder_quantiles",
    "predict_quantiles",
    "fit_linear_qr",
    "fit_linear_qr_batch",
    "fit_linear_qr_windows",
    "LinearQuantileModel",
    "SolverOptions",
    "FitDiagnostics",
    "fit_gradient_boosting_qr",
    "GBQuantileModel",
    "GBHyper",
]


def check_level(beta: float) -> float:
    """Validate a quantile level; levels must lie strictly in (0, 1)."""
    beta = float(beta)
    if not 0.0 < beta < 1.0:
        raise ValueError(f"quantile level must lie in (0, 1), got {beta}")
    return beta


def pinball_loss(y, y_hat, beta: float):
    """Check loss of level beta, elementwise on array inputs.

    rho_beta(y - y_hat) = (1-beta)*(y_hat-y) when y <= y_hat,
                          beta*(y-y_hat)    when y >= y_hat;
    the two branches agree (both zero) at y = y_hat.
    """
    beta = check_level(beta)
    y = np.asarray(y, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    r = y - y_hat
    out = np.where(r >= 0.0, beta * r, (beta - 1.0) * r)
    if out.ndim == 0:
        return float(out)
    return out


def reorder_quantiles(values, levels) -> np.ndarray:
    """Sort predicted quantiles ascending to repair level crossing.

    `levels` must be strictly ascending; the returned vector is the same
    multiset as `values`, nondecreasing, aligned with `levels`.
    """
    levels = np.asarray(levels, dtype=float)
    if levels.ndim != 1 or np.any(np.diff(levels) <= 0.0):
        raise ValueError("levels must be strictly ascending")
    values = np.asarray(values, dtype=float)
    if values.shape != levels.shape:
        raise ValueError(f"values shape {values.shape} != levels shape {levels.shape}")
    return np.sort(values)


@runtime_checkable
class QuantileForecaster(Protocol):
    """Contract shared by all fitted quantile models."""

    level: float

    @property
    def n_features(self) -> int: ...

    def predict(self, X: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class QuantileSetForecast:
    """One forecast per quantile level, guaranteed non-crossing.

    Construct via :func:`predict_quantiles` (which repairs crossings) or
    directly with already-monotone values.
    """

    levels: tuple[float, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.levels) != len(self.values):
            raise ValueError("levels and values must have equal length")
        if len(self.levels) == 0:
            raise ValueError("empty forecast")
        lv = np.asarray(self.levels, dtype=float)
        if np.any(lv <= 0.0) or np.any(lv >= 1.0) or np.any(np.diff(lv) <= 0.0):
            raise ValueError("levels must be strictly ascending within (0, 1)")
        vals = np.asarray(self.values, dtype=float)
        if np.any(np.diff(vals) < 0.0):
            raise ValueError("values must be nondecreasing; reorder before constructing")

    def value_at(self, level: float) -> float:
        try:
            return self.values[self.levels.index(level)]
        except ValueError:
            raise KeyError(f"level {level} not in forecast levels {self.levels}")


def predict_quantiles(models: Sequence[QuantileForecaster], x) -> QuantileSetForecast:
    """Evaluate one model per level at x and repair any crossing.

    Models must be sorted by strictly ascending level and agree on their
    feature dimension.
    """
    if not models:
        raise ValueError("need at least one model")
    x = np.asarray(x, dtype=float).reshape(-1)
    dims = {m.n_features for m in models}
    if len(dims) != 1:
        raise ValueError(f"models disagree on feature dimension: {sorted(dims)}")
    (dim,) = dims
    if x.shape[0] != dim:
        raise ValueError(f"x has {x.shape[0]} features, models expect {dim}")
    levels = np.asarray([m.level for m in models], dtype=float)
    raw = np.asarray([float(m.predict(x[None, :])[0]) for m in models])
    ordered = reorder_quantiles(raw, levels)
    return QuantileSetForecast(
        levels=tuple(float(l) for l in levels),
        values=tuple(float(v) for v in ordered),
    )


from .linear import (  # noqa: E402
    FitDiagnostics,
    LinearQuantileModel,
    SolverOptions,
    fit_linear_qr,
    fit_linear_qr_batch,
    fit_linear_qr_windows,
)
from .boosting import GBHyper, GBQuantileModel, fit_gradient_boosting_qr  # noqa: E402
