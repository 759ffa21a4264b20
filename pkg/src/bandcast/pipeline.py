"""Backtest orchestration: cells, caching, metrics, artifacts.

A *cell* is one (hour, method, window, cal_frac) combination. Cells that
share (hour, window, cal_frac) are streamed together so a single cached
quantile fit per window serves every method and level, but each method
owns its machines and the fits themselves are cold and memoized purely
by window range: results for a cell are bit-identical whether it runs
alone or next to others.

Everything written to results.csv / predictions.csv / weights.csv is a
pure function of the config (seeds included), so reruns are
byte-identical; wall-clock timings go to the run_meta.json sidecar
instead of the results table.
"""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import math
import time
from collections import OrderedDict
from dataclasses import dataclass, fields
from datetime import date
from pathlib import Path

import numpy as np

from . import __version__
from .aggregation import LossSpec, OnlineAggregator, clip_experts
from .config import METHOD_REGISTRY, RunConfig
from .conformal import (
    ACIConformal,
    AgACI,
    HorizonConformal,
    OSSCP,
    PredictionInterval,
    QuantilePair,
    RunningClipBound,
)
from .dataset import (
    CsvSchema,
    PanelFrame,
    SupervisedSeries,
    generate_synthetic,
    hour_slice_design,
    load_prices_csv,
)
from .errors import BandcastError, ConfigError, InsufficientHistoryError, ProtocolError
from .evaluation import average_width, block_bootstrap_ci, crps_riemann
from .models import QuantileSetForecast, pinball_loss
from .models.boosting import fit_gradient_boosting_qr
from .models.linear import SolverOptions, fit_linear_qr_batch

__all__ = [
    "RESULTS_SCHEMA",
    "PREDICTIONS_SCHEMA",
    "WEIGHTS_SCHEMA",
    "SELECTION_SCHEMA",
    "ResultsRow",
    "CellFailure",
    "BacktestResult",
    "TemporalHygieneSpy",
    "CachingPairSource",
    "run_backtest",
    "grid_search",
    "emit_report",
    "write_panel_csv",
]

RESULTS_SCHEMA = "bandcast.results.v1"
PREDICTIONS_SCHEMA = "bandcast.predictions.v1"
WEIGHTS_SCHEMA = "bandcast.weights.v1"
SELECTION_SCHEMA = "bandcast.selection.v1"
REPORT_SCHEMA = "bandcast.report.v1"

RESULT_COLUMNS = (
    "schema_version", "run_id", "method", "base_model", "window", "cal_frac",
    "hour", "level", "period", "n_steps",
    "coverage", "coverage_ci_lo", "coverage_ci_hi",
    "width", "width_finite_mean", "width_n_infinite", "width_ci_lo", "width_ci_hi",
    "mean_pinball", "mean_crps",
)
PREDICTION_COLUMNS = (
    "schema_version", "day", "hour", "method", "window", "cal_frac",
    "level", "lower", "upper",
)
WEIGHT_COLUMNS = (
    "schema_version", "method", "hour", "window", "cal_frac", "level",
    "bound", "step", "expert_id", "weight",
)

_PERIOD_ORDER = {"pre": 0, "post": 1, "all": 0}


@dataclass(frozen=True)
class ResultsRow:
    schema_version: str
    run_id: str
    method: str
    base_model: str
    window: int
    cal_frac: float
    hour: int
    level: float
    period: str
    n_steps: int
    coverage: float
    coverage_ci_lo: float
    coverage_ci_hi: float
    width: float
    width_finite_mean: float
    width_n_infinite: int
    width_ci_lo: float
    width_ci_hi: float
    mean_pinball: float
    mean_crps: float

    def as_dict(self) -> OrderedDict:
        return OrderedDict((f.name, getattr(self, f.name)) for f in fields(self))


@dataclass(frozen=True)
class CellFailure:
    hour: int
    method: str
    window: int
    cal_frac: float
    error: str


@dataclass
class BacktestResult:
    rows: list
    failures: list
    hygiene_violations: int
    paths: dict
    wall_time_s: float

    @property
    def ok(self) -> bool:
        return not self.failures


class TemporalHygieneSpy:
    """Audits the issue-interval -> reveal-truth order per stream.

    The orchestrator notifies the spy around every machine call; any
    out-of-order pattern (reveal without a pending prediction, double
    predict, non-monotone step index) is counted, and raised when
    strict.
    """

    def __init__(self, strict: bool = False):
        self.strict = strict
        self.violations = 0
        self._pending: dict = {}
        self._last_step: dict = {}

    def _flag(self, message: str) -> None:
        self.violations += 1
        if self.strict:
            raise ProtocolError(message)

    def before_predict(self, key, step: int) -> None:
        if self._pending.get(key) is not None:
            self._flag(f"{key}: predict at step {step} while step {self._pending[key]} is unrevealed")
        last = self._last_step.get(key)
        if last is not None and step <= last:
            self._flag(f"{key}: step {step} does not advance past {last}")
        self._pending[key] = step

    def before_reveal(self, key, step: int) -> None:
        if self._pending.get(key) != step:
            self._flag(f"{key}: truth for step {step} revealed without a matching prediction")
        self._pending[key] = None
        self._last_step[key] = step


def _stable_seed(*parts) -> int:
    blob = "|".join(str(p) for p in parts).encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:4], "big")


def _bound_levels(levels) -> tuple[tuple[float, ...], dict]:
    """Sorted grid of the 2 * len(levels) bound quantile levels.

    For target level L the interval bounds live at quantile levels
    (1-L)/2 and 1-(1-L)/2.
    """
    pair_of = {}
    grid = set()
    for L in levels:
        alpha = 1.0 - L
        lo, hi = alpha / 2.0, 1.0 - alpha / 2.0
        pair_of[L] = (lo, hi)
        grid.update((lo, hi))
    return tuple(sorted(grid)), pair_of


class CachingPairSource:
    """Cold, memoized quantile fits shared across machines and levels.

    One batched fit per window tag covers every bound level at once; the
    resulting models are cached under the (start, stop) tag so that all
    machines asking for the same window range share one solve. Fits
    never warm-start from other windows, so a tag's models depend only
    on that window's rows and the hyperparameters -- results cannot
    depend on which methods run together.
    """

    def __init__(self, bound_levels, *, base_model: str, l1_penalty: float,
                 gb_hyper, solver_options: SolverOptions, cache_cap: int = 64):
        self.bound_levels = tuple(bound_levels)
        self._index = {lv: i for i, lv in enumerate(self.bound_levels)}
        self.base_model = base_model
        self.l1_penalty = float(l1_penalty)
        self.gb_hyper = gb_hyper
        self.options = solver_options
        self.cache_cap = int(cache_cap)
        self._cache: OrderedDict = OrderedDict()
        self.batched_fits = 0

    def _remember(self, tag, models) -> None:
        self._cache[tag] = models
        while len(self._cache) > self.cache_cap:
            self._cache.popitem(last=False)

    def _fit_tag(self, X, y, tag):
        if self.base_model == "linear":
            models = fit_linear_qr_batch(
                X, y, self.bound_levels,
                penalties=[self.l1_penalty] * len(self.bound_levels),
                options=self.options,
            )
        else:
            models = [
                fit_gradient_boosting_qr(X, y, lv, self.gb_hyper)
                for lv in self.bound_levels
            ]
        self.batched_fits += 1
        self._remember(tag, models)
        return models

    def models_for(self, X, y, tag):
        hit = self._cache.get(tag)
        if hit is not None:
            self._cache.move_to_end(tag)
            return hit
        return self._fit_tag(np.asarray(X), np.asarray(y), tag)

    def pair_fitter(self, lo_level: float, hi_level: float):
        ilo, ihi = self._index[lo_level], self._index[hi_level]

        def fit_pair(X, y, tag) -> QuantilePair:
            models = self.models_for(X, y, tag)
            return QuantilePair(models[ilo], models[ihi])

        return fit_pair

    def windows_fitter(self, lo_level: float, hi_level: float):
        """Per-window fits routed through the shared tag cache.

        Solo fits beat a stacked multi-window solve here: the stacked
        solver stops only when its slowest window converges, so a
        warm-up burst pays worst-case iterations on every window. One
        code path also keeps a tag's fitted bits independent of which
        caller asked first.
        """
        ilo, ihi = self._index[lo_level], self._index[hi_level]

        def fit_windows(datasets, tags):
            return [
                QuantilePair(m[ilo], m[ihi])
                for m in (
                    self.models_for(Xw, yw, tag)
                    for (Xw, yw), tag in zip(datasets, tags)
                )
            ]

        return fit_windows


class _ConformalRunner:
    """One conformal machine per target level, stepped together."""

    def __init__(self, machines: dict):
        self.machines = machines  # level -> machine
        self._levels = sorted(machines)

    def predict_all(self, x) -> dict:
        return {L: self.machines[L].predict(x) for L in self._levels}

    def update_all(self, y: float) -> None:
        for L in self._levels:
            self.machines[L].update(y)

    def weight_rows(self):
        rows = []
        for L in self._levels:
            m = self.machines[L]
            if not isinstance(m, AgACI):
                continue
            for bound, agg in (("lower", m.lower_agg), ("upper", m.upper_agg)):
                hist = agg.weight_history
                for step in range(hist.shape[0]):
                    for k, eid in enumerate(agg.expert_ids):
                        rows.append((L, bound, step, eid, float(hist[step, k])))
        return rows


class _RawRunner:
    """Unconformalized quantile pairs refitted on the full sliding window."""

    def __init__(self, source: CachingPairSource, levels, pair_of, window: int,
                 X_hist, y_hist):
        self.source = source
        self.levels = sorted(levels)
        self.pair_of = pair_of
        self.window = int(window)
        self._X = [np.asarray(r, dtype=float) for r in X_hist]
        self._y = [float(v) for v in y_hist]
        if len(self._y) < self.window:
            raise InsufficientHistoryError(self.window, len(self._y))
        self._pending = None

    def predict_all(self, x) -> dict:
        if self._pending is not None:
            raise ProtocolError("interval already issued; call update first")
        t = len(self._y)
        tag = (t - self.window, t)
        models = self.source.models_for(
            np.asarray(self._X[tag[0]:tag[1]]), np.asarray(self._y[tag[0]:tag[1]]), tag
        )
        x1 = np.asarray(x, dtype=float).reshape(1, -1)
        out = {}
        for L in self.levels:
            lo_lv, hi_lv = self.pair_of[L]
            pair = QuantilePair(models[self.source._index[lo_lv]],
                                models[self.source._index[hi_lv]])
            lo, hi = pair.predict_bounds(x1)
            out[L] = PredictionInterval(float(lo[0]), float(hi[0]), L)
        self._pending = np.asarray(x, dtype=float).reshape(-1)
        return out

    def update_all(self, y: float) -> None:
        if self._pending is None:
            raise ProtocolError("truth delivered before an interval was issued")
        self._X.append(self._pending)
        self._y.append(float(y))
        self._pending = None

    def weight_rows(self):
        return []


class _EnsembleRunner:
    """Window-expert ensemble: one AgACI per expert window, bounds combined.

    mode "agg" learns the combination online (pinball + gradient trick,
    one weight engine per bound per level); mode "uniform" fixes equal
    weights. Either way expert bounds are clipped into the running
    target envelope first, and the combined pair is swap-repaired.
    """

    def __init__(self, mode: str, levels, expert_windows, machines: dict,
                 y_hist):
        self.mode = mode
        self.levels = sorted(levels)
        self.expert_windows = tuple(expert_windows)
        self.machines = machines  # level -> [AgACI per window]
        self.clip = RunningClipBound(y_hist)
        self._pending = False
        k = len(self.expert_windows)
        ids = tuple(f"window={w}" for w in self.expert_windows)
        self._aggs = {}
        if mode == "agg":
            for L in self.levels:
                alpha = 1.0 - L
                self._aggs[L] = (
                    OnlineAggregator(k, LossSpec(beta=alpha / 2.0, gradient_trick=True),
                                     expert_ids=ids),
                    OnlineAggregator(k, LossSpec(beta=1.0 - alpha / 2.0, gradient_trick=True),
                                     expert_ids=ids),
                )

    def predict_all(self, x) -> dict:
        if self._pending:
            raise ProtocolError("interval already issued; call update first")
        bound = self.clip.bound()
        out = {}
        for L in self.levels:
            itvs = [m.predict(x) for m in self.machines[L]]
            lows = clip_experts([itv.lower for itv in itvs], bound)
            highs = clip_experts([itv.upper for itv in itvs], bound)
            if self.mode == "agg":
                lo_agg, hi_agg = self._aggs[L]
                b_lo = lo_agg.predict(lows)
                b_hi = hi_agg.predict(highs)
            else:
                # clamp like the weight engine: a mean can round one ulp
                # outside the expert range
                b_lo = float(np.clip(lows.mean(), lows.min(), lows.max()))
                b_hi = float(np.clip(highs.mean(), highs.min(), highs.max()))
            if b_lo > b_hi:
                b_lo, b_hi = b_hi, b_lo
            out[L] = PredictionInterval(b_lo, b_hi, L)
        self._pending = True
        return out

    def update_all(self, y: float) -> None:
        if not self._pending:
            raise ProtocolError("truth delivered before an interval was issued")
        y = float(y)
        for L in self.levels:
            for m in self.machines[L]:
                m.update(y)
            if self.mode == "agg":
                lo_agg, hi_agg = self._aggs[L]
                lo_agg.update(y)
                hi_agg.update(y)
        self.clip.add(y)
        self._pending = False

    def weight_rows(self):
        rows = []
        if self.mode != "agg":
            return rows
        for L in self.levels:
            for bound, agg in zip(("lower", "upper"), self._aggs[L]):
                hist = agg.weight_history
                for step in range(hist.shape[0]):
                    for k, eid in enumerate(agg.expert_ids):
                        rows.append((L, bound, step, eid, float(hist[step, k])))
        return rows


def _load_panel(cfg: RunConfig) -> tuple[PanelFrame, int]:
    if cfg.data.source == "synthetic":
        return generate_synthetic(cfg.data.synthetic), 0
    loaded = load_prices_csv(cfg.data.csv_path, cfg.data.schema or CsvSchema())
    return loaded.panel, len(loaded.skipped)


def _build_runner(method: str, cfg: RunConfig, source: CachingPairSource,
                  pair_of: dict, window: int, cal_frac: float,
                  X_hist, y_hist):
    conf = cfg.conformal
    if method == "raw":
        return _RawRunner(source, cfg.levels, pair_of, window, X_hist, y_hist)
    if method in ("osscp", "aci", "agaci"):
        machines = {}
        for L in cfg.levels:
            lo, hi = pair_of[L]
            fit_pair = source.pair_fitter(lo, hi)
            if method == "osscp":
                machines[L] = OSSCP(
                    X_hist, y_hist, level=L, window=window, cal_frac=cal_frac,
                    fit_pair=fit_pair, refit_every=conf.refit_every,
                )
            elif method == "aci":
                machines[L] = ACIConformal(
                    X_hist, y_hist, level=L, window=window, cal_frac=cal_frac,
                    fit_pair=fit_pair, gamma=conf.aci_gamma,
                    refit_every=conf.refit_every,
                )
            else:
                machines[L] = AgACI(
                    X_hist, y_hist, level=L, window=window, cal_frac=cal_frac,
                    fit_pair=fit_pair, gamma_grid=conf.gamma_grid,
                    refit_every=conf.refit_every,
                )
        return _ConformalRunner(machines)
    if method == "osscp_horizon":
        n_cal = int(math.floor(window * cal_frac))
        train_len = window - n_cal
        machines = {}
        for L in cfg.levels:
            lo, hi = pair_of[L]
            machines[L] = HorizonConformal(
                X_hist, y_hist, level=L, train_len=train_len, cal_len=n_cal,
                fit_windows=source.windows_fitter(lo, hi), horizon=conf.horizon,
            )
        return _ConformalRunner(machines)
    if method in ("agg_agaci", "uniform"):
        machines = {}
        for L in cfg.levels:
            lo, hi = pair_of[L]
            fit_pair = source.pair_fitter(lo, hi)
            machines[L] = [
                AgACI(
                    X_hist, y_hist, level=L, window=w, cal_frac=cal_frac,
                    fit_pair=fit_pair, gamma_grid=conf.gamma_grid,
                    refit_every=conf.refit_every,
                )
                for w in cfg.expert_windows
            ]
        mode = "agg" if method == "agg_agaci" else "uniform"
        return _EnsembleRunner(mode, cfg.levels, cfg.expert_windows, machines, y_hist)
    raise ConfigError(f"unknown method {method!r}")


@dataclass
class _StepLog:
    """Per-step raw material for one method, all levels."""

    days: list
    covered: dict      # level -> list[float 0/1]
    widths: dict       # level -> list[float]
    pinballs: dict     # level -> list[float]
    crps: list         # list[float]
    bounds: dict       # level -> list[(lower, upper)]

    @classmethod
    def empty(cls, levels):
        return cls(
            days=[], covered={L: [] for L in levels}, widths={L: [] for L in levels},
            pinballs={L: [] for L in levels}, crps=[], bounds={L: [] for L in levels},
        )


def _crps_of_step(grid, pair_of, intervals: dict, y: float) -> float:
    if len(grid) < 3:
        return math.nan
    values = np.empty(len(grid))
    for L, itv in intervals.items():
        lo_lv, hi_lv = pair_of[L]
        values[grid.index(lo_lv)] = itv.lower
        values[grid.index(hi_lv)] = itv.upper
    forecast = QuantileSetForecast(levels=grid, values=tuple(np.sort(values)))
    return crps_riemann(forecast, y)


def _record_step(log: _StepLog, grid, pair_of, intervals: dict, y: float,
                 day: date) -> None:
    log.days.append(day)
    for L, itv in intervals.items():
        lo_lv, hi_lv = pair_of[L]
        log.covered[L].append(1.0 if itv.contains(y) else 0.0)
        log.widths[L].append(itv.width)
        pb = 0.5 * (pinball_loss(y, itv.lower, lo_lv) + pinball_loss(y, itv.upper, hi_lv))
        log.pinballs[L].append(pb)
        log.bounds[L].append((itv.lower, itv.upper))
    log.crps.append(_crps_of_step(grid, pair_of, intervals, y))


def _summarize_cell(cfg: RunConfig, hour: int, method: str, window: int,
                    cal_frac: float, log: _StepLog) -> list:
    if cfg.split_date is None:
        periods = {"all": list(range(len(log.days)))}
    else:
        pre = [i for i, d in enumerate(log.days) if d < cfg.split_date]
        post = [i for i, d in enumerate(log.days) if d >= cfg.split_date]
        periods = {"pre": pre, "post": post}
    rows = []
    ev = cfg.evaluation
    for L in sorted(log.covered):
        for period, idx in periods.items():
            if not idx:
                raise ConfigError(
                    f"period {period!r} has no test days; move split_date inside the test range"
                )
            cov = np.asarray([log.covered[L][i] for i in idx])
            wid = np.asarray([log.widths[L][i] for i in idx])
            pb = np.asarray([log.pinballs[L][i] for i in idx])
            cr = np.asarray([log.crps[i] for i in idx])
            blk = min(ev.block_len, len(idx))
            cov_ci = block_bootstrap_ci(
                cov, block_len=blk, n_boot=ev.n_boot,
                seed=_stable_seed(cfg.seed, hour, method, window, cal_frac, L, period, "coverage"),
            )
            wid_ci = block_bootstrap_ci(
                wid, block_len=blk, n_boot=ev.n_boot,
                seed=_stable_seed(cfg.seed, hour, method, window, cal_frac, L, period, "width"),
            )
            aw = average_width([(0.0, w) for w in wid])
            rows.append(ResultsRow(
                schema_version=RESULTS_SCHEMA, run_id=cfg.run_id, method=method,
                base_model=cfg.model.base_model, window=window, cal_frac=cal_frac,
                hour=hour, level=L, period=period, n_steps=len(idx),
                coverage=float(cov.mean()),
                coverage_ci_lo=cov_ci.lo, coverage_ci_hi=cov_ci.hi,
                width=aw.value, width_finite_mean=aw.finite_mean,
                width_n_infinite=aw.n_infinite,
                width_ci_lo=wid_ci.lo, width_ci_hi=wid_ci.hi,
                mean_pinball=float(pb.mean()), mean_crps=float(cr.mean()),
            ))
    return rows


def _canonical_methods(methods) -> list[str]:
    return [m for m in METHOD_REGISTRY if m in methods]


def _run_hour_group(cfg: RunConfig, series: SupervisedSeries, hour: int,
                    window: int, cal_frac: float, spy: TemporalHygieneSpy):
    """Stream every configured method over one (hour, window, cal_frac)."""
    grid, pair_of = _bound_levels(cfg.levels)
    X, y, days = series.X, series.y, series.days
    first_test = next((i for i, d in enumerate(days) if d >= cfg.test_start), None)
    if first_test is None:
        raise ConfigError(f"test_start {cfg.test_start} is after the last usable day for hour {hour}")
    if first_test == 0:
        raise ConfigError(f"no history before test_start {cfg.test_start} for hour {hour}")

    n_cal = int(math.floor(window * cal_frac))
    # capacity must hold the horizon warm-up burst (n_cal + 1 pairs) and,
    # when the horizon machine runs alongside the split engines, keep each
    # of its fitted windows alive for the n_cal steps until the engines
    # reuse it as their train window. The engines refresh one old entry
    # per step, so ~3 entries per step outrank a waiting one: 3 * n_cal
    # covers the wait, window + 8 covers the burst at any cal_frac.
    source = CachingPairSource(
        grid, base_model=cfg.model.base_model, l1_penalty=cfg.model.l1_penalty,
        gb_hyper=cfg.model.boosting,
        solver_options=SolverOptions(tol=cfg.model.solver_tol),
        cache_cap=max(64, window + 8, 3 * n_cal + 16),
    )
    X_hist, y_hist = X[:first_test], y[:first_test]

    rows, failures, predictions, weights = [], [], [], []
    timings: dict[str, float] = {}
    runners, logs = {}, {}
    for method in _canonical_methods(cfg.methods):
        t0 = time.perf_counter()
        try:
            runners[method] = _build_runner(
                method, cfg, source, pair_of, window, cal_frac, X_hist, y_hist
            )
            logs[method] = _StepLog.empty(cfg.levels)
        except (BandcastError, ValueError) as exc:
            failures.append(CellFailure(hour, method, window, cal_frac,
                                        f"{type(exc).__name__}: {exc}"))
        timings[method] = time.perf_counter() - t0

    for t in range(first_test, len(days)):
        x_t, y_t, day = X[t], float(y[t]), days[t]
        for method in list(runners):
            runner = runners[method]
            t0 = time.perf_counter()
            try:
                key = (hour, method, window, cal_frac)
                spy.before_predict(key, t)
                intervals = runner.predict_all(x_t)
                spy.before_reveal(key, t)
                runner.update_all(y_t)
            except (BandcastError, ValueError) as exc:
                failures.append(CellFailure(hour, method, window, cal_frac,
                                            f"{type(exc).__name__}: {exc}"))
                del runners[method], logs[method]
                continue
            finally:
                timings[method] += time.perf_counter() - t0
            _record_step(logs[method], grid, pair_of, intervals, y_t, day)

    for method, log in logs.items():
        try:
            rows.extend(_summarize_cell(cfg, hour, method, window, cal_frac, log))
        except (BandcastError, ValueError) as exc:
            failures.append(CellFailure(hour, method, window, cal_frac,
                                        f"{type(exc).__name__}: {exc}"))
            continue
        for L in sorted(log.bounds):
            for day, (lo, hi) in zip(log.days, log.bounds[L]):
                predictions.append(OrderedDict((
                    ("schema_version", PREDICTIONS_SCHEMA), ("day", day),
                    ("hour", hour), ("method", method), ("window", window),
                    ("cal_frac", cal_frac), ("level", L),
                    ("lower", lo), ("upper", hi),
                )))
        for L, bound, step, eid, wgt in runners[method].weight_rows():
            weights.append(OrderedDict((
                ("schema_version", WEIGHTS_SCHEMA), ("method", method),
                ("hour", hour), ("window", window), ("cal_frac", cal_frac),
                ("level", L), ("bound", bound), ("step", step),
                ("expert_id", eid), ("weight", wgt),
            )))
    return rows, failures, predictions, weights, timings


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, date):
        return v.isoformat()
    return str(v)


def _write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in columns])


def run_backtest(cfg: RunConfig) -> BacktestResult:
    """Execute every configured cell; write results + artifacts; never
    let one failing cell kill the sweep."""
    started = time.perf_counter()
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    panel, skipped_rows = _load_panel(cfg)
    last_day = panel.days[-1]
    if cfg.test_start > last_day:
        raise ConfigError(f"test_start {cfg.test_start} is after the panel's last day {last_day}")
    if cfg.split_date is not None and cfg.split_date > last_day:
        raise ConfigError(f"split_date {cfg.split_date} is outside the test range (last day {last_day})")

    spy = TemporalHygieneSpy(strict=False)
    all_rows, all_failures, all_preds, all_weights = [], [], [], []
    cell_times = {}
    for hour in sorted(set(cfg.hours)):
        try:
            series = hour_slice_design(panel, hour, lag_spec=cfg.model.lags)
        except BandcastError as exc:
            for method, window, cal_frac in itertools.product(
                _canonical_methods(cfg.methods), cfg.windows, cfg.cal_fracs
            ):
                all_failures.append(CellFailure(hour, method, window, cal_frac,
                                                f"{type(exc).__name__}: {exc}"))
            continue
        for window in sorted(set(cfg.windows)):
            for cal_frac in sorted(set(cfg.cal_fracs)):
                t0 = time.perf_counter()
                try:
                    rows, failures, preds, weights, timings = _run_hour_group(
                        cfg, series, hour, window, cal_frac, spy
                    )
                except (BandcastError, ValueError) as exc:
                    for method in _canonical_methods(cfg.methods):
                        all_failures.append(CellFailure(
                            hour, method, window, cal_frac,
                            f"{type(exc).__name__}: {exc}",
                        ))
                    continue
                all_rows.extend(rows)
                all_failures.extend(failures)
                all_preds.extend(preds)
                all_weights.extend(weights)
                group = time.perf_counter() - t0
                cell_times[f"hour={hour} window={window} cal_frac={cal_frac:g}"] = {
                    "seconds": round(group, 3),
                    "per_method_seconds": {m: round(s, 3) for m, s in timings.items()},
                }

    all_rows.sort(key=lambda r: (
        r.hour, r.method, r.window, r.cal_frac, r.level, _PERIOD_ORDER.get(r.period, 9)
    ))
    paths = {
        "results": out_dir / "results.csv",
        "predictions": out_dir / "predictions.csv",
        "weights": out_dir / "weights.csv",
        "meta": out_dir / "run_meta.json",
    }
    _write_csv(paths["results"], RESULT_COLUMNS, [r.as_dict() for r in all_rows])
    _write_csv(paths["predictions"], PREDICTION_COLUMNS, all_preds)
    _write_csv(paths["weights"], WEIGHT_COLUMNS, all_weights)

    wall = time.perf_counter() - started
    meta = {
        "schema_version": "bandcast.run_meta.v1",
        "package_version": __version__,
        "run_id": cfg.run_id,
        "seed": cfg.seed,
        "artifact_schemas": {
            "results.csv": RESULTS_SCHEMA,
            "predictions.csv": PREDICTIONS_SCHEMA,
            "weights.csv": WEIGHTS_SCHEMA,
        },
        "n_result_rows": len(all_rows),
        "n_prediction_rows": len(all_preds),
        "n_weight_rows": len(all_weights),
        "skipped_csv_rows": skipped_rows,
        "hygiene_violations": spy.violations,
        "failures": [f.__dict__ for f in all_failures],
        # timings are environment noise, quarantined here so the CSV
        # artifacts stay byte-identical across reruns
        "wall_time_s": round(wall, 3),
        "cells": cell_times,
    }
    with open(paths["meta"], "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")

    return BacktestResult(
        rows=all_rows, failures=all_failures, hygiene_violations=spy.violations,
        paths={k: str(v) for k, v in paths.items()}, wall_time_s=wall,
    )


# ---------------------------------------------------------------------------
# grid search


def _linear_candidates(grid) -> list[dict]:
    # most-shrunk first so argmin ties resolve toward the simpler model
    return [{"l1_penalty": lam} for lam in sorted(set(grid.linear_l1), reverse=True)]


def _gb_candidates(grid) -> list[dict]:
    combos = sorted(set(itertools.product(
        (int(n) for n in grid.gb_n_estimators),
        (int(d) for d in grid.gb_max_depth),
        (float(lr) for lr in grid.gb_learning_rate),
    )))
    return [
        {"n_estimators": n, "max_depth": d, "learning_rate": lr}
        for n, d, lr in combos
    ]


def grid_search(cfg: RunConfig, out_path: str | None = None) -> dict:
    """Pick base-model hyperparameters by mean validation pinball.

    Candidates are fitted once on the training rows (the most recent
    max-window rows before val_start), scored on [val_start, test_start)
    at every bound level, and the argmin wins; the candidate ordering
    breaks ties toward the simpler model.
    """
    if cfg.grid.val_start is None:
        raise ConfigError("gridsearch requires val_start")
    if not (cfg.grid.val_start < cfg.test_start):
        raise ConfigError("val_start must precede test_start")
    panel, _ = _load_panel(cfg)
    grid, _pair_of = _bound_levels(cfg.levels)
    base = cfg.model.base_model
    candidates = _linear_candidates(cfg.grid) if base == "linear" else _gb_candidates(cfg.grid)

    scores = np.zeros(len(candidates))
    n_scored = 0
    max_window = max(cfg.windows)
    for hour in sorted(set(cfg.hours)):
        series = hour_slice_design(panel, hour, lag_spec=cfg.model.lags)
        days = series.days
        tr_idx = [i for i, d in enumerate(days) if d < cfg.grid.val_start]
        va_idx = [i for i, d in enumerate(days)
                  if cfg.grid.val_start <= d < cfg.test_start]
        if not tr_idx or not va_idx:
            raise ConfigError(
                f"hour {hour}: empty training or validation range for grid search"
            )
        tr_idx = tr_idx[-max_window:]
        Xtr, ytr = series.X[tr_idx], series.y[tr_idx]
        Xva, yva = series.X[va_idx], series.y[va_idx]
        for c, cand in enumerate(candidates):
            if base == "linear":
                models = fit_linear_qr_batch(
                    Xtr, ytr, grid, penalties=[cand["l1_penalty"]] * len(grid),
                    options=SolverOptions(tol=cfg.model.solver_tol),
                )
            else:
                hyper = cfg.model.boosting
                hyper = type(hyper)(
                    n_estimators=cand["n_estimators"], max_depth=cand["max_depth"],
                    learning_rate=cand["learning_rate"],
                    subsample_frac=hyper.subsample_frac, seed=hyper.seed,
                )
                models = [fit_gradient_boosting_qr(Xtr, ytr, lv, hyper) for lv in grid]
            loss = np.mean([
                np.mean(pinball_loss(yva, m.predict(Xva), lv))
                for lv, m in zip(grid, models)
            ])
            scores[c] += float(loss)
        n_scored += 1
    scores /= n_scored

    best = int(np.argmin(scores))
    selection = {
        "schema_version": SELECTION_SCHEMA,
        "base_model": base,
        "criterion": "mean validation pinball over bound levels",
        "selected": candidates[best],
        "candidates": [
            {"params": cand, "score": float(s)}
            for cand, s in zip(candidates, scores)
        ],
        "val_start": cfg.grid.val_start.isoformat(),
        "test_start": cfg.test_start.isoformat(),
        "hours": list(sorted(set(cfg.hours))),
        "train_window": max_window,
    }
    if out_path is None:
        out_path = str(Path(cfg.out_dir) / "selection.json")
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w") as fh:
        json.dump(selection, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return selection


# ---------------------------------------------------------------------------
# report emission


_RESULT_TYPES = {
    "window": int, "hour": int, "n_steps": int, "width_n_infinite": int,
    "cal_frac": float, "level": float,
    "coverage": float, "coverage_ci_lo": float, "coverage_ci_hi": float,
    "width": float, "width_finite_mean": float,
    "width_ci_lo": float, "width_ci_hi": float,
    "mean_pinball": float, "mean_crps": float,
}


def read_results_csv(path: str) -> list[OrderedDict]:
    rows = []
    with open(path, newline="") as fh:
        for raw in csv.DictReader(fh):
            row = OrderedDict()
            for col in RESULT_COLUMNS:
                conv = _RESULT_TYPES.get(col, str)
                row[col] = conv(raw[col])
            rows.append(row)
    if not rows:
        raise ValueError(f"results file {path} has no data rows")
    return rows


def emit_report(rows, out_dir: str, fmt: str = "csv", plot_data: bool = False,
                weights_path: str | None = None) -> dict:
    """Reshape a results table into tidy metrics and optional plot series."""
    if isinstance(rows, (str, Path)):
        rows = read_results_csv(str(rows))
    else:
        rows = [r.as_dict() if isinstance(r, ResultsRow) else OrderedDict(r) for r in rows]
    if not rows:
        raise ValueError("empty results table")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}

    if fmt == "json":
        p = out / "results.json"
        with open(p, "w") as fh:
            json.dump({"schema_version": REPORT_SCHEMA, "rows": rows}, fh, indent=2)
            fh.write("\n")
        paths["results_json"] = str(p)
    elif fmt == "csv":
        tidy_cols = ("schema_version", "method", "hour", "window", "cal_frac",
                     "level", "period", "metric", "value", "ci_lo", "ci_hi")
        tidy = []
        for r in rows:
            for metric, value, lo, hi in (
                ("coverage", r["coverage"], r["coverage_ci_lo"], r["coverage_ci_hi"]),
                ("width", r["width"], r["width_ci_lo"], r["width_ci_hi"]),
                ("pinball", r["mean_pinball"], "", ""),
                ("crps", r["mean_crps"], "", ""),
            ):
                tidy.append(OrderedDict((
                    ("schema_version", REPORT_SCHEMA), ("method", r["method"]),
                    ("hour", r["hour"]), ("window", r["window"]),
                    ("cal_frac", r["cal_frac"]), ("level", r["level"]),
                    ("period", r["period"]), ("metric", metric),
                    ("value", value), ("ci_lo", lo), ("ci_hi", hi),
                )))
        p = out / "metrics_tidy.csv"
        _write_csv(p, tidy_cols, tidy)
        paths["metrics_tidy"] = str(p)
    else:
        raise ConfigError(f"unknown report format {fmt!r} (use csv or json)")

    if plot_data:
        for metric, fname in (("coverage", "plot_coverage.csv"), ("width", "plot_width.csv")):
            cols = ("schema_version", "method", "period", "hour", "window",
                    "cal_frac", "target_level", "value", "ci_lo", "ci_hi")
            series = [
                OrderedDict((
                    ("schema_version", REPORT_SCHEMA), ("method", r["method"]),
                    ("period", r["period"]), ("hour", r["hour"]),
                    ("window", r["window"]), ("cal_frac", r["cal_frac"]),
                    ("target_level", r["level"]), ("value", r[metric]),
                    ("ci_lo", r[f"{metric}_ci_lo"]), ("ci_hi", r[f"{metric}_ci_hi"]),
                ))
                for r in rows
            ]
            p = out / fname
            _write_csv(p, cols, series)
            paths[fname] = str(p)
        if weights_path and Path(weights_path).exists():
            dest = out / "plot_weights.csv"
            dest.write_bytes(Path(weights_path).read_bytes())
            paths["plot_weights.csv"] = str(dest)
    return paths


def write_panel_csv(panel: PanelFrame, path: str, *, price_column: str = "price") -> None:
    """Serialize a panel to the long CSV format the loader reads back."""
    feature_names = sorted(panel.features)
    columns = ["date", "hour", price_column, *feature_names]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for i, day in enumerate(panel.days):
            for j, hour in enumerate(panel.hours):
                if not panel.valid[i, j]:
                    continue
                row = [day.isoformat(), hour, repr(float(panel.price[i, j]))]
                row.extend(repr(float(panel.features[name][i, j])) for name in feature_names)
                writer.writerow(row)
