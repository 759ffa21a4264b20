"""Conformity scores and the four online conformal wrappers.

All wrappers are single-writer sequential machines with a strict
issue-interval -> observe-truth cycle:

    interval = machine.predict(x_new)   # uses only past data
    machine.update(y_new)               # reveals the truth, advances state

* OSSCP refits its quantile pair on a sliding sequential train/cal split
  and corrects the pair with the calibration score quantile.
* HorizonConformal (OSSCP-horizon) keeps every calibration score an
  honest horizon-h error by scoring each calibration point with a pair
  fitted only on data available h steps before it; one pair fit per step
  in steady state.
* ACIConformal adapts the effective miscoverage level alpha_t by the
  recursion alpha_{t+1} = alpha_t + gamma * (alpha - miss_t).
* AgACI runs K ACI experts on a shared engine and aggregates their lower
  and upper bounds with two independent online weight engines.

Base models enter through a `fit_pair(X, y, tag)` callable returning a
:class:`QuantilePair`; `tag` is the (start, stop) row range of the
window inside the machine's history, which lets callers cache or batch
fits across machines that share data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .aggregation import BOAState, LossSpec, OnlineAggregator, clip_experts
from .dataset import sequential_split
from .errors import ConfigError, InsufficientHistoryError, ProtocolError
from .models import check_level
from .models.boosting import GBQuantileModel
from .models.linear import LinearQuantileModel

__all__ = [
    "PredictionInterval",
    "ScoreWindow",
    "QuantilePair",
    "cqr_score",
    "corrected_quantile",
    "conformal_interval",
    "OSSCP",
    "osscp_step",
    "HorizonConformal",
    "osscp_horizon_step",
    "ACIState",
    "aci_step",
    "ACIConformal",
    "AgACI",
    "agaci_step",
    "default_gamma_grid",
    "RunningClipBound",
]


@dataclass(frozen=True)
class PredictionInterval:
    """A closed interval with explicitly representable infinite bounds."""

    lower: float
    upper: float
    level: float

    def __post_init__(self):
        check_level(self.level)
        if math.isnan(self.lower) or math.isnan(self.upper):
            raise ValueError("interval bounds must not be NaN")
        if self.lower > self.upper:
            raise ValueError(f"lower {self.lower} exceeds upper {self.upper}")

    def contains(self, y: float) -> bool:
        return self.lower <= y <= self.upper

    @property
    def width(self) -> float:
        return self.upper - self.lower

    @property
    def is_finite(self) -> bool:
        return math.isfinite(self.lower) and math.isfinite(self.upper)


class ScoreWindow:
    """Fixed-capacity score buffer: oldest-first eviction, sorted queries.

    Keeps insertion (time) order for replay/serialization next to a
    lazily maintained sorted view for order-statistic lookups.
    """

    def __init__(self, capacity: int, scores=()):
        if capacity < 1:
            raise ConfigError("score window capacity must be >= 1")
        self.capacity = int(capacity)
        self._scores: list[float] = [float(s) for s in scores][-self.capacity:]
        self._sorted: np.ndarray | None = None

    def push(self, score: float) -> None:
        if len(self._scores) == self.capacity:
            self._scores.pop(0)
        self._scores.append(float(score))
        self._sorted = None

    def __len__(self) -> int:
        return len(self._scores)

    @property
    def scores(self) -> tuple[float, ...]:
        return tuple(self._scores)

    @property
    def sorted_scores(self) -> np.ndarray:
        if self._sorted is None:
            self._sorted = np.sort(np.asarray(self._scores))
        return self._sorted


def cqr_score(y: float, q_lo: float, q_hi: float) -> float:
    """Conformity score max{q_lo - y, y - q_hi}.

    Negative iff y lies strictly inside (q_lo, q_hi), zero on a bound.
    Inputs must already be ordered (reorder crossed pairs first).
    """
    if q_lo > q_hi:
        raise ValueError(f"crossed quantiles: q_lo {q_lo} > q_hi {q_hi}")
    return max(q_lo - y, y - q_hi)


def _cqr_scores(y: np.ndarray, q_lo: np.ndarray, q_hi: np.ndarray) -> np.ndarray:
    if np.any(q_lo > q_hi):
        raise ValueError("crossed quantiles in batch scoring")
    return np.maximum(q_lo - y, y - q_hi)


def corrected_quantile(scores, alpha: float) -> float:
    """Finite-sample-corrected empirical score quantile.

    Returns the k-th smallest score with k = ceil((1 - alpha) * (n + 1)),
    or +inf when k > n (the correction exceeds the sample). k is
    computed in exact rational arithmetic so float rounding can never
    shift the order statistic.
    """
    alpha = check_level(alpha)
    if isinstance(scores, ScoreWindow):
        arr = scores.sorted_scores
    else:
        arr = np.sort(np.asarray(scores, dtype=float))
    n = arr.shape[0]
    if n == 0:
        raise ValueError("empty score set")
    k = math.ceil((1 - Fraction(alpha)) * (n + 1))
    if k > n:
        return math.inf
    return float(arr[k - 1])


def conformal_interval(q_lo: float, q_hi: float, correction: float, level: float) -> PredictionInterval:
    """[q_lo - Q, q_hi + Q], with the two degenerate cases made explicit.

    Q = +inf yields the whole line. A negative Q large enough to invert
    the bounds collapses to the point interval at the pair midpoint,
    which preserves lower <= upper without fabricating coverage.
    """
    if q_lo > q_hi:
        raise ValueError(f"crossed quantiles: q_lo {q_lo} > q_hi {q_hi}")
    if math.isnan(correction) or correction == -math.inf:
        raise ValueError(f"invalid correction {correction}")
    if correction == math.inf:
        return PredictionInterval(-math.inf, math.inf, level)
    lo = q_lo - correction
    hi = q_hi + correction
    if lo > hi:
        mid = (q_lo + q_hi) / 2.0
        lo = hi = mid
    return PredictionInterval(lo, hi, level)


@dataclass(frozen=True)
class QuantilePair:
    """Fitted lower/upper quantile models for one target level."""

    lo: object
    hi: object

    def __post_init__(self):
        if not (hasattr(self.lo, "predict") and hasattr(self.hi, "predict")):
            raise TypeError("pair members must expose predict()")

    def predict_bounds(self, X) -> tuple[np.ndarray, np.ndarray]:
        """Row-wise (lower, upper) predictions, reordered where crossed."""
        lo = np.asarray(self.lo.predict(X), dtype=float)
        hi = np.asarray(self.hi.predict(X), dtype=float)
        return np.minimum(lo, hi), np.maximum(lo, hi)

    def to_dict(self) -> dict:
        if not (hasattr(self.lo, "to_dict") and hasattr(self.hi, "to_dict")):
            raise TypeError("pair members do not support serialization")
        return {"lo": self.lo.to_dict(), "hi": self.hi.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "QuantilePair":
        return cls(lo=_model_from_dict(d["lo"]), hi=_model_from_dict(d["hi"]))


_MODEL_LOADERS = {
    "bandcast.linear_qr.v1": LinearQuantileModel.from_dict,
    "bandcast.qgb.v1": GBQuantileModel.from_dict,
}


def _model_from_dict(d: dict):
    loader = _MODEL_LOADERS.get(d.get("format"))
    if loader is None:
        raise ValueError(f"unknown model format {d.get('format')!r}")
    return loader(d)


class _RollingCqrEngine:
    """History + sliding sequential split + fitted pair + cal scores.

    Shared by OSSCP, ACIConformal, and AgACI: they differ only in how
    they turn the engine's pair predictions and score window into an
    interval.
    """

    def __init__(self, X, y, *, window: int, cal_frac: float, fit_pair,
                 refit_every=1):
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float).reshape(-1)
        if X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise ValueError("X must be (n, d) aligned with y")
        self._X: list[np.ndarray] = [row.copy() for row in X]
        self._y: list[float] = [float(v) for v in y]
        self.window = int(window)
        self.cal_frac = float(cal_frac)
        self.refit_every = math.inf if refit_every is None else float(refit_every)
        if self.refit_every < 1:
            raise ConfigError("refit_every must be >= 1 (or None for never)")
        self.fit_pair = fit_pair
        self.steps_since_fit = 0
        self.pair: QuantilePair | None = None
        self.scores: ScoreWindow | None = None
        self._refresh(fit=True)

    @property
    def t(self) -> int:
        return len(self._y)

    def split_slices(self) -> tuple[slice, slice]:
        # positions are 1-based in sequential_split; history rows 0..t-1
        # are observations 1..t and the next prediction is position t+1
        s = sequential_split(self.t, self.t + 1, self.window, self.cal_frac)
        train = slice(s.train.start - 1, s.train.stop - 1)
        cal = slice(s.cal.start - 1, s.cal.stop - 1)
        return train, cal

    def _refresh(self, fit: bool) -> None:
        train, cal = self.split_slices()
        if fit:
            Xtr = np.asarray(self._X[train])
            ytr = np.asarray(self._y[train])
            self.pair = self.fit_pair(Xtr, ytr, (train.start, train.stop))
            self.steps_since_fit = 0
        Xcal = np.asarray(self._X[cal])
        ycal = np.asarray(self._y[cal])
        lo, hi = self.pair.predict_bounds(Xcal)
        scores = _cqr_scores(ycal, lo, hi)
        self.scores = ScoreWindow(capacity=len(scores), scores=scores)

    def bounds_at(self, x) -> tuple[float, float]:
        x = np.asarray(x, dtype=float).reshape(1, -1)
        lo, hi = self.pair.predict_bounds(x)
        return float(lo[0]), float(hi[0])

    def observe(self, x, y: float) -> None:
        self._X.append(np.asarray(x, dtype=float).reshape(-1).copy())
        self._y.append(float(y))
        self.steps_since_fit += 1
        self._refresh(fit=self.steps_since_fit >= self.refit_every)

    def to_dict(self) -> dict:
        return {
            "window": self.window,
            "cal_frac": self.cal_frac,
            "refit_every": None if math.isinf(self.refit_every) else int(self.refit_every),
            "steps_since_fit": self.steps_since_fit,
            "x": [row.tolist() for row in self._X],
            "y": list(self._y),
            "pair": self.pair.to_dict(),
            "scores": list(self.scores.scores),
        }

    @classmethod
    def from_dict(cls, d: dict, fit_pair) -> "_RollingCqrEngine":
        eng = cls.__new__(cls)
        eng._X = [np.asarray(row, dtype=float) for row in d["x"]]
        eng._y = [float(v) for v in d["y"]]
        eng.window = int(d["window"])
        eng.cal_frac = float(d["cal_frac"])
        eng.refit_every = math.inf if d["refit_every"] is None else float(d["refit_every"])
        eng.fit_pair = fit_pair
        eng.steps_since_fit = int(d["steps_since_fit"])
        eng.pair = QuantilePair.from_dict(d["pair"])
        scores = d["scores"]
        eng.scores = ScoreWindow(capacity=len(scores), scores=scores)
        return eng


class _StrictCycle:
    """Mixin enforcing the issue-interval -> observe-truth protocol."""

    _pending = None

    def _issue(self, x, payload) -> None:
        if self._pending is not None:
            raise ProtocolError("interval already issued; call update() first")
        self._pending = (np.asarray(x, dtype=float).reshape(-1), payload)

    def _take_pending(self):
        if self._pending is None:
            raise ProtocolError("truth delivered before an interval was issued")
        pending = self._pending
        self._pending = None
        return pending

    def _forbid_pending(self, action: str) -> None:
        if self._pending is not None:
            raise ProtocolError(f"cannot {action} while an interval is pending")


class OSSCP(_StrictCycle):
    """Online sequential split conformal with CQR scores.

    Each step slides the sequential split by one day, refits the pair on
    the new train rows every `refit_every` steps, recomputes calibration
    scores under the active pair, and corrects the pair's interval by
    the corrected score quantile.
    """

    def __init__(self, X, y, *, level: float, window: int, cal_frac: float,
                 fit_pair, refit_every=1):
        self.level = check_level(level)
        self.alpha = 1.0 - self.level
        self.engine = _RollingCqrEngine(
            X, y, window=window, cal_frac=cal_frac,
            fit_pair=fit_pair, refit_every=refit_every,
        )

    def predict(self, x) -> PredictionInterval:
        lo, hi = self.engine.bounds_at(x)
        interval = conformal_interval(
            lo, hi, corrected_quantile(self.engine.scores, self.alpha), self.level
        )
        self._issue(x, interval)
        return interval

    def update(self, y: float) -> None:
        x, _ = self._take_pending()
        self.engine.observe(x, float(y))

    def to_dict(self) -> dict:
        self._forbid_pending("serialize")
        return {
            "format": "bandcast.osscp.v1",
            "level": self.level,
            "engine": self.engine.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict, fit_pair) -> "OSSCP":
        if d.get("format") != "bandcast.osscp.v1":
            raise ValueError(f"unsupported state format {d.get('format')!r}")
        obj = cls.__new__(cls)
        obj.level = check_level(d["level"])
        obj.alpha = 1.0 - obj.level
        obj.engine = _RollingCqrEngine.from_dict(d["engine"], fit_pair)
        obj._pending = None
        return obj


def osscp_step(machine: OSSCP, x_new, y_new) -> tuple[PredictionInterval, OSSCP]:
    """Issue the interval for x_new, then reveal y_new. Returns both."""
    interval = machine.predict(x_new)
    machine.update(y_new)
    return interval, machine


class HorizonConformal(_StrictCycle):
    """OSSCP variant whose calibration scores are true horizon-h errors.

    The score for time t comes from a pair fitted on rows
    {t - train_len, ..., t - horizon} only, so calibration errors have
    the same forecast horizon as the prediction task. Warm-up performs
    the cal_len backdated fits (plus the first prediction pair) eagerly;
    afterwards each step fits exactly one new pair, and the pair that
    predicted a step is the one that scores it.
    """

    def __init__(self, X, y, *, level: float, train_len: int, cal_len: int,
                 fit_pair=None, fit_windows=None, horizon: int = 1):
        if horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if horizon >= train_len:
            raise ConfigError(
                f"horizon {horizon} must be smaller than train_len {train_len}"
            )
        if cal_len < 1:
            raise ConfigError("cal_len must be >= 1")
        if fit_pair is None and fit_windows is None:
            raise ConfigError("provide fit_pair or fit_windows")
        self.level = check_level(level)
        self.alpha = 1.0 - self.level
        self.train_len = int(train_len)
        self.cal_len = int(cal_len)
        self.horizon = int(horizon)
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float).reshape(-1)
        if X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise ValueError("X must be (n, d) aligned with y")
        T = y.shape[0]
        if T < self.train_len + self.cal_len:
            raise InsufficientHistoryError(self.train_len + self.cal_len, T)
        self._X = [row.copy() for row in X]
        self._y = [float(v) for v in y]
        self.fit_pair = fit_pair
        self.fit_windows = fit_windows

        # one backdated window per calibration point, then the window for
        # the first prediction (next index T)
        targets = list(range(T - self.cal_len, T)) + [T]
        windows = [self._train_slice(t) for t in targets]
        pairs = self._fit_many(windows)
        scores = []
        for t, pair in zip(targets[:-1], pairs[:-1]):
            lo, hi = pair.predict_bounds(X[t][None, :])
            scores.append(cqr_score(y[t], float(lo[0]), float(hi[0])))
        self.scores = ScoreWindow(capacity=self.cal_len, scores=scores)
        self.pair = pairs[-1]
        self.fits_performed = len(pairs)

    def _train_slice(self, t: int) -> tuple[int, int]:
        # rows {t - train_len, ..., t - horizon} inclusive
        return (t - self.train_len, t - self.horizon + 1)

    def _fit_many(self, windows) -> list[QuantilePair]:
        datasets = [
            (np.asarray(self._X[s:e]), np.asarray(self._y[s:e])) for s, e in windows
        ]
        if self.fit_windows is not None:
            return list(self.fit_windows(datasets, list(windows)))
        return [
            self.fit_pair(Xw, yw, (s, e))
            for (Xw, yw), (s, e) in zip(datasets, windows)
        ]

    @property
    def t(self) -> int:
        return len(self._y)

    def predict(self, x) -> PredictionInterval:
        lo, hi = self.pair.predict_bounds(np.asarray(x, dtype=float).reshape(1, -1))
        lo, hi = float(lo[0]), float(hi[0])
        interval = conformal_interval(
            lo, hi, corrected_quantile(self.scores, self.alpha), self.level
        )
        self._issue(x, (lo, hi, interval))
        return interval

    def update(self, y: float) -> None:
        x, (lo, hi, _) = self._take_pending()
        y = float(y)
        # the cached pair was fitted for exactly this target time, so
        # this score is an honest horizon-h error
        self.scores.push(cqr_score(y, lo, hi))
        self._X.append(x.copy())
        self._y.append(y)
        (pair,) = self._fit_many([self._train_slice(self.t)])
        self.pair = pair
        self.fits_performed += 1

    def to_dict(self) -> dict:
        self._forbid_pending("serialize")
        return {
            "format": "bandcast.osscp_horizon.v1",
            "level": self.level,
            "train_len": self.train_len,
            "cal_len": self.cal_len,
            "horizon": self.horizon,
            "x": [row.tolist() for row in self._X],
            "y": list(self._y),
            "scores": list(self.scores.scores),
            "pair": self.pair.to_dict(),
            "fits_performed": self.fits_performed,
        }

    @classmethod
    def from_dict(cls, d: dict, fit_pair=None, fit_windows=None) -> "HorizonConformal":
        if d.get("format") != "bandcast.osscp_horizon.v1":
            raise ValueError(f"unsupported state format {d.get('format')!r}")
        obj = cls.__new__(cls)
        obj.level = check_level(d["level"])
        obj.alpha = 1.0 - obj.level
        obj.train_len = int(d["train_len"])
        obj.cal_len = int(d["cal_len"])
        obj.horizon = int(d["horizon"])
        obj._X = [np.asarray(row, dtype=float) for row in d["x"]]
        obj._y = [float(v) for v in d["y"]]
        obj.fit_pair = fit_pair
        obj.fit_windows = fit_windows
        obj.scores = ScoreWindow(capacity=obj.cal_len, scores=d["scores"])
        obj.pair = QuantilePair.from_dict(d["pair"])
        obj.fits_performed = int(d["fits_performed"])
        obj._pending = None
        return obj


def osscp_horizon_step(machine: HorizonConformal, x_new, y_new) -> tuple[PredictionInterval, HorizonConformal]:
    interval = machine.predict(x_new)
    machine.update(y_new)
    return interval, machine


@dataclass(frozen=True)
class ACIState:
    """The adaptive miscoverage recursion's state: (alpha, gamma, alpha_t).

    alpha_t legitimately leaves [0, 1]; interval issuance handles the
    excursions (below 0: the whole line; at or above 1: the raw pair).
    """

    alpha_target: float
    gamma: float
    alpha_t: float

    def __post_init__(self):
        check_level(self.alpha_target)
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")

    @classmethod
    def fresh(cls, alpha_target: float, gamma: float) -> "ACIState":
        return cls(alpha_target=alpha_target, gamma=gamma, alpha_t=alpha_target)


def aci_step(state: ACIState, interval: PredictionInterval | None, covered: bool) -> ACIState:
    """alpha_{t+1} = alpha_t + gamma * (alpha - 1{missed}).

    `interval` is the interval that was issued at level alpha_t; it is
    accepted so audit logs can replay the step verbatim, but only
    `covered` enters the recursion.
    """
    miss = 0.0 if covered else 1.0
    return ACIState(
        alpha_target=state.alpha_target,
        gamma=state.gamma,
        alpha_t=state.alpha_t + state.gamma * (state.alpha_target - miss),
    )


def _interval_at_alpha_t(alpha_t: float, lo: float, hi: float,
                         scores: ScoreWindow, level: float) -> PredictionInterval:
    """Interval conventions shared by ACI and the AgACI experts."""
    if alpha_t <= 0.0:
        return PredictionInterval(-math.inf, math.inf, level)
    if alpha_t >= 1.0:
        return PredictionInterval(lo, hi, level)
    return conformal_interval(lo, hi, corrected_quantile(scores, alpha_t), level)


class ACIConformal(_StrictCycle):
    """Adaptive conformal inference on top of the rolling CQR engine.

    gamma = 0 reduces exactly (bitwise) to OSSCP.
    """

    def __init__(self, X, y, *, level: float, window: int, cal_frac: float,
                 fit_pair, gamma: float, refit_every=1):
        self.level = check_level(level)
        self.alpha = 1.0 - self.level
        self.state = ACIState.fresh(self.alpha, gamma)
        self.engine = _RollingCqrEngine(
            X, y, window=window, cal_frac=cal_frac,
            fit_pair=fit_pair, refit_every=refit_every,
        )

    def predict(self, x) -> PredictionInterval:
        lo, hi = self.engine.bounds_at(x)
        interval = _interval_at_alpha_t(
            self.state.alpha_t, lo, hi, self.engine.scores, self.level
        )
        self._issue(x, interval)
        return interval

    def update(self, y: float) -> None:
        x, interval = self._take_pending()
        y = float(y)
        self.state = aci_step(self.state, interval, interval.contains(y))
        self.engine.observe(x, y)

    def to_dict(self) -> dict:
        self._forbid_pending("serialize")
        return {
            "format": "bandcast.aci.v1",
            "level": self.level,
            "alpha_target": self.state.alpha_target,
            "gamma": self.state.gamma,
            "alpha_t": self.state.alpha_t,
            "engine": self.engine.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict, fit_pair) -> "ACIConformal":
        if d.get("format") != "bandcast.aci.v1":
            raise ValueError(f"unsupported state format {d.get('format')!r}")
        obj = cls.__new__(cls)
        obj.level = check_level(d["level"])
        obj.alpha = 1.0 - obj.level
        obj.state = ACIState(
            alpha_target=float(d["alpha_target"]),
            gamma=float(d["gamma"]),
            alpha_t=float(d["alpha_t"]),
        )
        obj.engine = _RollingCqrEngine.from_dict(d["engine"], fit_pair)
        obj._pending = None
        return obj


class RunningClipBound:
    """B = [min - IQR, max + IQR] over all targets observed so far.

    The interquartile range uses linear interpolation. Degenerate (all
    targets equal) bounds raise rather than silently clamping everything
    to a point.
    """

    def __init__(self, initial=()):
        self._values = [float(v) for v in initial]

    def add(self, y: float) -> None:
        self._values.append(float(y))

    def __len__(self) -> int:
        return len(self._values)

    def bound(self) -> tuple[float, float]:
        if len(self._values) < 2:
            raise ValueError("need at least 2 observed targets for a clip bound")
        arr = np.asarray(self._values)
        q25, q75 = np.quantile(arr, [0.25, 0.75])
        iqr = float(q75 - q25)
        lo = float(arr.min()) - iqr
        hi = float(arr.max()) + iqr
        if not lo < hi:
            raise ValueError("degenerate clip bound: all observed targets equal")
        return lo, hi


def default_gamma_grid() -> tuple[float, ...]:
    """{0} plus a 7-point geometric sweep of 1e-4 .. 5e-2 (K = 8).

    gamma = 0 anchors the non-adaptive case; the sweep spans sluggish to
    volatile adaptation.
    """
    return (0.0,) + tuple(float(g) for g in np.geomspace(1e-4, 5e-2, 7))


class AgACI(_StrictCycle):
    """Aggregated ACI: K gamma-experts, two independent bound aggregations.

    All experts share one rolling engine (one pair fit, one score
    window); they differ only in their alpha_t trajectories. Expert
    bounds are clipped into the running bound B, the lower bounds are
    aggregated under pinball loss at level alpha/2 and the upper bounds
    at level 1 - alpha/2, both with the gradient trick; a final
    swap-repair enforces lower <= upper.
    """

    def __init__(self, X, y, *, level: float, window: int, cal_frac: float,
                 fit_pair, gamma_grid=None, refit_every=1):
        self.level = check_level(level)
        self.alpha = 1.0 - self.level
        if gamma_grid is None:
            gamma_grid = default_gamma_grid()
        gamma_grid = tuple(float(g) for g in gamma_grid)
        if len(gamma_grid) == 0:
            raise ConfigError("gamma grid must not be empty")
        self.gamma_grid = gamma_grid
        self.states = [ACIState.fresh(self.alpha, g) for g in gamma_grid]
        self.engine = _RollingCqrEngine(
            X, y, window=window, cal_frac=cal_frac,
            fit_pair=fit_pair, refit_every=refit_every,
        )
        expert_ids = tuple(f"gamma={g:g}" for g in gamma_grid)
        k = len(gamma_grid)
        self.lower_agg = OnlineAggregator(
            k, LossSpec(beta=self.alpha / 2.0, gradient_trick=True),
            expert_ids=expert_ids,
        )
        self.upper_agg = OnlineAggregator(
            k, LossSpec(beta=1.0 - self.alpha / 2.0, gradient_trick=True),
            expert_ids=expert_ids,
        )
        self.clip = RunningClipBound(self.engine._y)

    def expert_intervals(self, x) -> list[PredictionInterval]:
        lo, hi = self.engine.bounds_at(x)
        return [
            _interval_at_alpha_t(st.alpha_t, lo, hi, self.engine.scores, self.level)
            for st in self.states
        ]

    def predict(self, x) -> PredictionInterval:
        intervals = self.expert_intervals(x)
        bound = self.clip.bound()
        lower_clipped = clip_experts([itv.lower for itv in intervals], bound)
        upper_clipped = clip_experts([itv.upper for itv in intervals], bound)
        b_lo = self.lower_agg.predict(lower_clipped)
        b_hi = self.upper_agg.predict(upper_clipped)
        if b_lo > b_hi:
            b_lo, b_hi = b_hi, b_lo
        interval = PredictionInterval(b_lo, b_hi, self.level)
        self._issue(x, (intervals, interval))
        return interval

    def update(self, y: float) -> None:
        x, (intervals, _) = self._take_pending()
        y = float(y)
        # each expert adapts to its own coverage, not the aggregate's
        self.states = [
            aci_step(st, itv, itv.contains(y))
            for st, itv in zip(self.states, intervals)
        ]
        self.lower_agg.update(y)
        self.upper_agg.update(y)
        self.clip.add(y)
        self.engine.observe(x, y)

    @property
    def weight_history(self) -> dict[str, np.ndarray]:
        return {
            "lower": self.lower_agg.weight_history,
            "upper": self.upper_agg.weight_history,
        }

    def to_dict(self) -> dict:
        self._forbid_pending("serialize")
        return {
            "format": "bandcast.agaci.v1",
            "level": self.level,
            "gamma_grid": list(self.gamma_grid),
            "alpha_t": [st.alpha_t for st in self.states],
            "lower_rule": self.lower_agg.state.to_dict(),
            "upper_rule": self.upper_agg.state.to_dict(),
            "engine": self.engine.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict, fit_pair) -> "AgACI":
        if d.get("format") != "bandcast.agaci.v1":
            raise ValueError(f"unsupported state format {d.get('format')!r}")
        obj = cls.__new__(cls)
        obj.level = check_level(d["level"])
        obj.alpha = 1.0 - obj.level
        obj.gamma_grid = tuple(float(g) for g in d["gamma_grid"])
        obj.states = [
            ACIState(alpha_target=obj.alpha, gamma=g, alpha_t=float(a))
            for g, a in zip(obj.gamma_grid, d["alpha_t"])
        ]
        obj.engine = _RollingCqrEngine.from_dict(d["engine"], fit_pair)
        expert_ids = tuple(f"gamma={g:g}" for g in obj.gamma_grid)
        k = len(obj.gamma_grid)
        obj.lower_agg = OnlineAggregator(
            k, LossSpec(beta=obj.alpha / 2.0, gradient_trick=True),
            state=BOAState.from_dict(d["lower_rule"]), expert_ids=expert_ids,
        )
        obj.upper_agg = OnlineAggregator(
            k, LossSpec(beta=1.0 - obj.alpha / 2.0, gradient_trick=True),
            state=BOAState.from_dict(d["upper_rule"]), expert_ids=expert_ids,
        )
        obj.clip = RunningClipBound(obj.engine._y)
        obj._pending = None
        return obj


def agaci_step(machine: AgACI, x_new, y_new) -> tuple[PredictionInterval, AgACI]:
    interval = machine.predict(x_new)
    machine.update(y_new)
    return interval, machine
