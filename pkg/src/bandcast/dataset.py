"""Price panels: CSV ingestion, synthetic generation, per-hour supervised series.

The panel layout is day x hour. Day-ahead markets publish all 24 hourly
prices of day d at once on day d-1, so one model is built per hour and
the day index is the only temporal axis that matters for splitting.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from datetime import date, timedelta

import numpy as np

from .errors import (
    ConfigError,
    DuplicateKeyError,
    InsufficientHistoryError,
    SchemaError,
)

__all__ = [
    "PanelFrame",
    "CsvSchema",
    "RowIssue",
    "LoadedPanel",
    "SyntheticConfig",
    "SupervisedSeries",
    "ColumnMeta",
    "SplitIndices",
    "load_prices_csv",
    "generate_synthetic",
    "hour_slice_design",
    "sequential_split",
]


def _freeze(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class PanelFrame:
    """A day x hour panel of prices and named features.

    Parameters
    ----------
    days : tuple of datetime.date
        Strictly increasing calendar dates.
    hours : tuple of int
        Sorted, unique hour labels (subset of 0..23).
    price : ndarray, shape (n_days, n_hours)
        Price in EUR/MWh; NaN where no valid observation exists.
    features : dict of str -> ndarray, shape (n_days, n_hours)
        Named feature matrices. All features here are day-ahead-published
        quantities (known before the target day), e.g. residual-load
        forecast or nuclear availability; price lags are derived later by
        :func:`hour_slice_design`.
    valid : ndarray of bool, shape (n_days, n_hours)
        True where price and every feature are present and finite.

    All arrays are made read-only at construction; instances are safe to
    share across parallel backtest workers.
    """

    days: tuple[date, ...]
    hours: tuple[int, ...]
    price: np.ndarray
    features: dict[str, np.ndarray]
    valid: np.ndarray

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.days, self.days[1:])):
            raise SchemaError("panel days must be strictly increasing")
        if list(self.hours) != sorted(set(self.hours)):
            raise SchemaError("panel hours must be sorted and unique")
        shape = (len(self.days), len(self.hours))
        if self.price.shape != shape or self.valid.shape != shape:
            raise SchemaError(
                f"price/valid shape {self.price.shape} does not match panel {shape}"
            )
        for name, mat in self.features.items():
            if mat.shape != shape:
                raise SchemaError(f"feature {name!r} shape {mat.shape} != {shape}")
        _freeze(self.price)
        _freeze(self.valid)
        for mat in self.features.values():
            _freeze(mat)

    @property
    def n_days(self) -> int:
        return len(self.days)

    def hour_column(self, hour: int) -> int:
        try:
            return self.hours.index(hour)
        except ValueError:
            raise SchemaError(f"hour {hour} not in panel hours {list(self.hours)}")


@dataclass(frozen=True)
class CsvSchema:
    """Column names expected in a long-format price CSV.

    `feature_columns` are required by name; any further columns present in
    the file are ingested as additional features.
    """

    date_column: str = "date"
    hour_column: str = "hour"
    price_column: str = "price"
    feature_columns: tuple[str, ...] = ()


@dataclass(frozen=True)
class RowIssue:
    """One skipped CSV row: 1-based physical line number and the reason."""

    line: int
    reason: str


@dataclass(frozen=True)
class LoadedPanel:
    panel: PanelFrame
    skipped: tuple[RowIssue, ...]


def load_prices_csv(path, schema: CsvSchema = CsvSchema()) -> LoadedPanel:
    """Read a long-format day-ahead price file into a validated panel.

    The file must have a header row and the columns named by `schema`.
    Rows with unparseable dates, hours, or numerics are skipped and
    reported with their line number rather than aborting the load: real
    market files have gaps, and backtests need explicit missing-day
    accounting. Structural problems (missing columns, duplicate
    (day, hour) keys) abort.

    Returns
    -------
    LoadedPanel
        The panel plus the per-row skip report. (day, hour) combinations
        absent from the file appear in the panel grid with valid=False.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file, header row required")
        header = [h.strip() for h in header]
        required = [schema.date_column, schema.hour_column, schema.price_column]
        required += list(schema.feature_columns)
        for col in required:
            if col not in header:
                raise SchemaError(f"{path}: missing required column {col!r}")
        col_of = {name: header.index(name) for name in header}
        key_cols = {schema.date_column, schema.hour_column}
        feature_names = [c for c in header if c not in key_cols and c != schema.price_column]

        cells: dict[tuple[date, int], tuple[float, list[float]]] = {}
        skipped: list[RowIssue] = []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                skipped.append(RowIssue(line_no, f"expected {len(header)} fields, got {len(row)}"))
                continue
            try:
                day = date.fromisoformat(row[col_of[schema.date_column]].strip())
            except ValueError:
                skipped.append(RowIssue(line_no, "unparseable date"))
                continue
            try:
                hour = int(row[col_of[schema.hour_column]].strip())
            except ValueError:
                skipped.append(RowIssue(line_no, "unparseable hour"))
                continue
            key = (day, hour)
            if key in cells:
                raise DuplicateKeyError(
                    f"{path}: line {line_no}: duplicate key ({day.isoformat()}, hour={hour})"
                )
            try:
                price = _parse_number(row[col_of[schema.price_column]])
                feats = [_parse_number(row[col_of[name]]) for name in feature_names]
            except ValueError as exc:
                skipped.append(RowIssue(line_no, f"unparseable numeric ({exc})"))
                continue
            cells[key] = (price, feats)

        if not cells:
            raise SchemaError(f"{path}: no valid data rows")

        days = tuple(sorted({d for d, _ in cells}))
        hours = tuple(sorted({h for _, h in cells}))
        shape = (len(days), len(hours))
        price = np.full(shape, np.nan)
        feats = {name: np.full(shape, np.nan) for name in feature_names}
        day_pos = {d: i for i, d in enumerate(days)}
        hour_pos = {h: j for j, h in enumerate(hours)}
        for (d, h), (p, fv) in cells.items():
            i, j = day_pos[d], hour_pos[h]
            price[i, j] = p
            for name, v in zip(feature_names, fv):
                feats[name][i, j] = v
        valid = np.isfinite(price)
        for mat in feats.values():
            valid &= np.isfinite(mat)
        panel = PanelFrame(days=days, hours=hours, price=price, features=feats, valid=valid)
        return LoadedPanel(panel=panel, skipped=tuple(skipped))


def _parse_number(text: str) -> float:
    text = text.strip()
    if not text:
        raise ValueError("empty cell")
    return float(text)


@dataclass(frozen=True)
class SyntheticConfig:
    """Configuration for the nonstationary synthetic price generator.

    The generated price follows, per day d and hour h,

        Y[d,h] = m_d * s_h + a * Y[d-1,h] + b * Z_d + v_d * sigma * eps[d,h] + spike,

    where (m_d, v_d) = (1, 1) before `shift_day` and
    (shift_mean_mult, shift_scale_mult) from `shift_day` on, eps is iid
    standard normal, and spikes are additive positive exponential shocks
    of scale `spike_scale` occurring independently with probability
    `spike_prob`. The abrupt (m, v) switch emulates the kind of
    distribution shift seen in real price panels; spikes mimic positive
    price spikes without modeling market microstructure.

    Z is either supplied via `exo_series` (length n_days) or simulated as
    a standard-normal-driven AR(1) with coefficient 0.7; it is emitted as
    the panel feature named `exo_name`.
    """

    n_days: int
    hours: tuple[int, ...] = tuple(range(24))
    hourly_levels: tuple[float, ...] | None = None
    ar_coef: float = 0.0
    exo_coef: float = 0.0
    noise_scale: float = 1.0
    shift_day: int | None = None
    shift_mean_mult: float = 1.0
    shift_scale_mult: float = 1.0
    spike_prob: float = 0.0
    spike_scale: float = 1.0
    seed: int = 0
    start_date: date = date(2016, 1, 1)
    exo_series: tuple[float, ...] | None = None
    exo_name: str = "exo"

    def __post_init__(self):
        if self.n_days < 1:
            raise ConfigError("n_days must be >= 1")
        if not self.hours or list(self.hours) != sorted(set(self.hours)):
            raise ConfigError("hours must be non-empty, sorted, unique")
        if any(h < 0 or h > 23 for h in self.hours):
            raise ConfigError("hours must lie in 0..23")
        if not abs(self.ar_coef) < 1:
            raise ConfigError("ar_coef must satisfy |a| < 1")
        if not self.noise_scale > 0:
            raise ConfigError("noise_scale must be > 0")
        if self.shift_day is not None and not 0 <= self.shift_day <= self.n_days:
            raise ConfigError("shift_day must lie in [0, n_days]")
        if self.shift_mean_mult <= 0 or self.shift_scale_mult <= 0:
            raise ConfigError("shift multipliers must be > 0")
        if not 0 <= self.spike_prob < 1:
            raise ConfigError("spike_prob must lie in [0, 1)")
        if self.spike_scale <= 0:
            raise ConfigError("spike_scale must be > 0")
        if self.hourly_levels is not None and len(self.hourly_levels) != len(self.hours):
            raise ConfigError("hourly_levels must match hours length")
        if self.exo_series is not None and len(self.exo_series) != self.n_days:
            raise ConfigError("exo_series must have length n_days")

    def levels(self) -> np.ndarray:
        if self.hourly_levels is not None:
            return np.asarray(self.hourly_levels, dtype=float)
        # default daily shape: cheap night, morning/evening peaks
        h = np.asarray(self.hours, dtype=float)
        return 40.0 + 12.0 * np.sin(2.0 * math.pi * (h - 3.0) / 24.0)


def generate_synthetic(cfg: SyntheticConfig) -> PanelFrame:
    """Draw one panel from the synthetic price model; pure in `cfg`.

    Calling twice with the same config (same seed) returns bit-identical
    panels.
    """
    rng = np.random.default_rng(cfg.seed)
    n, H = cfg.n_days, len(cfg.hours)
    s = cfg.levels()

    if cfg.exo_series is not None:
        z = np.asarray(cfg.exo_series, dtype=float)
        rng.standard_normal(n)  # keep the draw schedule fixed either way
    else:
        innov = rng.standard_normal(n)
        z = np.empty(n)
        prev = 0.0
        for d in range(n):
            prev = 0.7 * prev + innov[d]
            z[d] = prev

    eps = rng.standard_normal((n, H))
    spike_mask = rng.random((n, H)) < cfg.spike_prob
    spike_amp = rng.exponential(cfg.spike_scale, size=(n, H))

    m = np.ones(n)
    v = np.ones(n)
    if cfg.shift_day is not None:
        m[cfg.shift_day:] = cfg.shift_mean_mult
        v[cfg.shift_day:] = cfg.shift_scale_mult

    price = np.empty((n, H))
    y_prev = np.zeros(H)
    for d in range(n):
        y = (
            m[d] * s
            + cfg.ar_coef * y_prev
            + cfg.exo_coef * z[d]
            + v[d] * cfg.noise_scale * eps[d]
        )
        y = y + np.where(spike_mask[d], spike_amp[d], 0.0)
        price[d] = y
        y_prev = y

    days = tuple(cfg.start_date + timedelta(days=d) for d in range(n))
    features = {cfg.exo_name: np.repeat(z[:, None], H, axis=1)}
    valid = np.ones((n, H), dtype=bool)
    return PanelFrame(
        days=days, hours=tuple(cfg.hours), price=price, features=features, valid=valid
    )


@dataclass(frozen=True)
class ColumnMeta:
    """Provenance of one design column, used to check anti-leakage.

    kind is "price_lag" (value taken from day d - lag) or "exogenous"
    (day-ahead-published quantity, available before the target day).
    """

    name: str
    kind: str
    lag: int = 0


@dataclass(frozen=True)
class SupervisedSeries:
    """Per-hour regression view of a panel: one row per usable target day.

    t_index holds the 0-based panel day positions of the targets, so row
    i of X predicts y[i] = price at day t_index[i] for the fixed hour.
    """

    hour: int
    t_index: np.ndarray
    X: np.ndarray
    y: np.ndarray
    max_lag: int
    columns: tuple[ColumnMeta, ...]
    days: tuple[date, ...] = ()

    def __post_init__(self):
        if self.X.shape[0] != self.y.shape[0] or self.X.shape[0] != self.t_index.shape[0]:
            raise SchemaError("X, y, t_index row counts differ")
        if self.X.ndim != 2 or self.X.shape[1] != len(self.columns):
            raise SchemaError("X column count does not match column metadata")
        _freeze(self.X)
        _freeze(self.y)
        _freeze(self.t_index)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def feature_names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.columns)


def hour_slice_design(
    panel: PanelFrame, hour: int, lag_spec: set[int] | tuple[int, ...] = (1, 7)
) -> SupervisedSeries:
    """Build the design for one hour: requested price lags + all features.

    Rows are target days d >= max(lag_spec) whose price, features, and
    every lagged price are valid; days failing any of those are dropped.
    Price lags use the same hour as the target, so no value in X depends
    on panel data at the target day or later.
    """
    lags = sorted(set(int(l) for l in lag_spec))
    if any(l <= 0 for l in lags):
        raise ConfigError(f"lags must be positive, got {lags}")
    j = panel.hour_column(hour)
    max_lag = max(lags, default=0)
    if panel.n_days <= max_lag:
        raise InsufficientHistoryError(max_lag + 1, panel.n_days, "panel days")

    price = panel.price[:, j]
    valid = panel.valid[:, j]
    feat_names = sorted(panel.features)
    feats = [panel.features[name][:, j] for name in feat_names]

    rows = []
    for d in range(max_lag, panel.n_days):
        if bool(valid[d]) and all(bool(valid[d - l]) for l in lags):
            rows.append(d)
    idx = np.asarray(rows, dtype=np.int64)
    X_cols = []
    columns: list[ColumnMeta] = []
    for l in lags:
        X_cols.append(price[idx - l])
        columns.append(ColumnMeta(name=f"price_lag{l}", kind="price_lag", lag=l))
    for name, col in zip(feat_names, feats):
        X_cols.append(col[idx])
        columns.append(ColumnMeta(name=name, kind="exogenous", lag=0))
    X = np.column_stack(X_cols) if X_cols else np.empty((len(idx), 0))
    return SupervisedSeries(
        hour=hour,
        t_index=idx,
        X=X,
        y=price[idx].copy(),
        max_lag=max_lag,
        columns=tuple(columns),
        days=tuple(panel.days[d] for d in rows),
    )


@dataclass(frozen=True)
class SplitIndices:
    """Sequential train/calibration split; train strictly precedes cal.

    Both ranges hold 1-based observation positions (first observation is
    position 1), matching the convention of :func:`sequential_split`.
    """

    train: range
    cal: range

    def __post_init__(self):
        if len(self.train) == 0 or len(self.cal) == 0:
            raise ConfigError("train and cal must be non-empty")
        if max(self.train) >= min(self.cal):
            raise ConfigError("train must end before cal starts")


def sequential_split(n_obs: int, t_pred: int, window: int, cal_frac: float) -> SplitIndices:
    """Split the `window` observations before t_pred into train then cal.

    Positions are 1-based: observations occupy 1..n_obs and t_pred is the
    position being predicted. The most recent floor(window * cal_frac)
    positions before t_pred form the calibration set and the remaining
    ceil(window * (1 - cal_frac)) positions immediately before them form
    the training set, so train and cal are contiguous, disjoint, and cal
    ends at t_pred - 1.

    Sets smaller than 1 are errors, never silently clamped.
    """
    if not 0.0 < cal_frac < 1.0:
        raise ConfigError(f"cal_frac must lie strictly in (0, 1), got {cal_frac}")
    if window < 1:
        raise ConfigError(f"window must be >= 1, got {window}")
    if t_pred < 2 or t_pred > n_obs + 1:
        raise ConfigError(
            f"t_pred must lie in [2, n_obs + 1] = [2, {n_obs + 1}], got {t_pred}"
        )
    if window > t_pred - 1:
        raise InsufficientHistoryError(window, t_pred - 1)
    n_cal = math.floor(window * cal_frac)
    if n_cal < 1:
        raise ConfigError(
            f"window * cal_frac = {window * cal_frac:.3f} gives an empty calibration set"
        )
    cal = range(t_pred - n_cal, t_pred)
    train = range(t_pred - window, t_pred - n_cal)
    return SplitIndices(train=train, cal=cal)
