"""Run configuration: typed dataclasses plus the TOML loader.

The config file has one section per concern:

    [pipeline]        hours, levels, windows, cal_fracs, methods, dates, seed, out_dir
    [dataset]         source = "csv" | "synthetic" (+ [dataset.synthetic] / csv keys)
    [quantile_models] base_model, l1_penalty, lags (+ [quantile_models.boosting])
    [conformal]       refit_every, aci_gamma, gamma_grid, horizon
    [aggregation]     expert_windows
    [evaluation]      n_boot, block_len
    [gridsearch]      val_start + candidate grids

Unknown keys anywhere are errors: a typo that silently falls back to a
default is worse than a refused config.
"""

from __future__ import annotations

import hashlib
import sys
from dataclasses import dataclass, field, fields, replace
from datetime import date

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .dataset import CsvSchema, SyntheticConfig
from .errors import ConfigError
from .models import check_level
from .models.boosting import GBHyper

__all__ = [
    "DataConfig",
    "ModelConfig",
    "ConformalConfig",
    "EvalConfig",
    "GridSearchConfig",
    "RunConfig",
    "load_config",
    "config_from_dict",
    "config_digest",
]

METHOD_REGISTRY = (
    "raw",
    "osscp",
    "osscp_horizon",
    "aci",
    "agaci",
    "agg_agaci",
    "uniform",
)

DEFAULT_HOURS = (3, 8, 13, 18, 23)
DEFAULT_LEVELS = (0.6, 0.7, 0.8, 0.9, 0.95, 0.98)
DEFAULT_WINDOWS = (1460, 1095, 730, 365, 270, 180, 90)
DEFAULT_CAL_FRACS = (0.25, 0.5, 0.75)


def _as_date(value, key: str) -> date:
    if isinstance(value, date):
        return value
    try:
        return date.fromisoformat(str(value))
    except ValueError as exc:
        raise ConfigError(f"{key}: expected an ISO date, got {value!r}") from exc


def _no_leftovers(section: str, d: dict) -> None:
    if d:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(d)}")


@dataclass(frozen=True)
class DataConfig:
    source: str
    csv_path: str | None = None
    schema: CsvSchema | None = None
    synthetic: SyntheticConfig | None = None

    def __post_init__(self):
        if self.source not in ("csv", "synthetic"):
            raise ConfigError(f"dataset source must be csv or synthetic, got {self.source!r}")
        if self.source == "csv" and not self.csv_path:
            raise ConfigError("dataset source csv requires a path")
        if self.source == "synthetic" and self.synthetic is None:
            raise ConfigError("dataset source synthetic requires [dataset.synthetic]")


@dataclass(frozen=True)
class ModelConfig:
    base_model: str = "linear"
    l1_penalty: float = 0.0
    lags: tuple[int, ...] = (1, 7)
    # backtests refit thousands of windows; 1e-5 is indistinguishable
    # after conformal correction and roughly twice as fast as 1e-6
    solver_tol: float = 1e-5
    boosting: GBHyper = field(default_factory=GBHyper)

    def __post_init__(self):
        if self.base_model not in ("linear", "boosting"):
            raise ConfigError(f"base_model must be linear or boosting, got {self.base_model!r}")
        if self.l1_penalty < 0:
            raise ConfigError("l1_penalty must be >= 0")
        if not (0 < self.solver_tol < 1):
            raise ConfigError("solver_tol must lie in (0, 1)")
        if not self.lags or any(int(l) < 1 for l in self.lags):
            raise ConfigError("lags must be a non-empty list of positive day offsets")
        object.__setattr__(self, "lags", tuple(int(l) for l in self.lags))


@dataclass(frozen=True)
class ConformalConfig:
    refit_every: int | None = 1
    aci_gamma: float = 0.01
    gamma_grid: tuple[float, ...] | None = None
    horizon: int = 1

    def __post_init__(self):
        if self.refit_every is not None and int(self.refit_every) < 1:
            raise ConfigError("refit_every must be >= 1 (or 0/absent for never)")
        if self.aci_gamma < 0:
            raise ConfigError("aci_gamma must be >= 0")
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if self.gamma_grid is not None:
            object.__setattr__(
                self, "gamma_grid", tuple(float(g) for g in self.gamma_grid)
            )


@dataclass(frozen=True)
class EvalConfig:
    n_boot: int = 500
    block_len: int = 30

    def __post_init__(self):
        if self.n_boot < 1:
            raise ConfigError("n_boot must be >= 1")
        if self.block_len < 1:
            raise ConfigError("block_len must be >= 1")


@dataclass(frozen=True)
class GridSearchConfig:
    val_start: date | None = None
    linear_l1: tuple[float, ...] = (0.0,)
    gb_n_estimators: tuple[int, ...] = (100,)
    gb_max_depth: tuple[int, ...] = (2,)
    gb_learning_rate: tuple[float, ...] = (0.1,)

    def __post_init__(self):
        for name in ("linear_l1", "gb_n_estimators", "gb_max_depth", "gb_learning_rate"):
            if not getattr(self, name):
                raise ConfigError(f"gridsearch {name} must be non-empty")


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig
    test_start: date
    hours: tuple[int, ...] = DEFAULT_HOURS
    levels: tuple[float, ...] = DEFAULT_LEVELS
    windows: tuple[int, ...] = DEFAULT_WINDOWS
    cal_fracs: tuple[float, ...] = DEFAULT_CAL_FRACS
    methods: tuple[str, ...] = ("osscp",)
    expert_windows: tuple[int, ...] = ()
    split_date: date | None = None
    seed: int = 0
    out_dir: str = "runs/backtest"
    run_id: str = ""
    model: ModelConfig = field(default_factory=ModelConfig)
    conformal: ConformalConfig = field(default_factory=ConformalConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    grid: GridSearchConfig = field(default_factory=GridSearchConfig)

    def __post_init__(self):
        if not self.hours:
            raise ConfigError("hours must be non-empty")
        if any(not (0 <= int(h) <= 23) for h in self.hours):
            raise ConfigError("hours must lie in 0..23")
        if not self.levels:
            raise ConfigError("levels must be non-empty")
        for lv in self.levels:
            check_level(lv)
        if len(set(self.levels)) != len(self.levels):
            raise ConfigError("duplicate target levels in config")
        if not self.windows or any(int(w) < 4 for w in self.windows):
            raise ConfigError("windows must be non-empty, each >= 4 days")
        if not self.cal_fracs or any(not (0.0 < f < 1.0) for f in self.cal_fracs):
            raise ConfigError("cal_fracs must be non-empty fractions in (0, 1)")
        if not self.methods:
            raise ConfigError("methods must be non-empty")
        unknown = [m for m in self.methods if m not in METHOD_REGISTRY]
        if unknown:
            raise ConfigError(
                f"unknown methods {unknown}; available: {list(METHOD_REGISTRY)}"
            )
        if len(set(self.methods)) != len(self.methods):
            raise ConfigError("duplicate methods in config")
        if self.split_date is not None and self.split_date <= self.test_start:
            raise ConfigError("split_date must fall strictly after test_start")
        object.__setattr__(self, "hours", tuple(int(h) for h in self.hours))
        object.__setattr__(self, "levels", tuple(float(v) for v in self.levels))
        object.__setattr__(self, "windows", tuple(int(w) for w in self.windows))
        object.__setattr__(self, "cal_fracs", tuple(float(f) for f in self.cal_fracs))
        object.__setattr__(self, "methods", tuple(self.methods))
        ew = tuple(int(w) for w in self.expert_windows) or self.windows
        if any(w < 4 for w in ew):
            raise ConfigError("expert_windows must each be >= 4 days")
        object.__setattr__(self, "expert_windows", ew)
        if not self.run_id:
            object.__setattr__(self, "run_id", config_digest(self))

    def with_overrides(self, *, seed=None, out_dir=None, hours=None, levels=None) -> "RunConfig":
        changes = {}
        if seed is not None:
            changes["seed"] = int(seed)
        if out_dir is not None:
            changes["out_dir"] = str(out_dir)
        if hours is not None:
            changes["hours"] = tuple(hours)
        if levels is not None:
            changes["levels"] = tuple(levels)
        if not changes:
            return self
        changes["run_id"] = ""  # re-derive from the new content
        return replace(self, **changes)


def _canonical(v) -> str:
    if isinstance(v, dict):
        return "{" + ",".join(f"{k}:{_canonical(v[k])}" for k in sorted(v)) + "}"
    if isinstance(v, (list, tuple)):
        return "[" + ",".join(_canonical(x) for x in v) + "]"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _dataclass_repr(obj) -> str:
    if obj is None:
        return "None"
    if hasattr(obj, "__dataclass_fields__"):
        items = {f.name: _dataclass_repr(getattr(obj, f.name)) for f in fields(obj)}
        return type(obj).__name__ + _canonical(items)
    if isinstance(obj, (list, tuple, dict)):
        return _canonical(obj)
    return _canonical(obj)


def config_digest(cfg: RunConfig) -> str:
    """Stable 12-hex digest of the experiment content.

    run_id and out_dir are excluded: where artifacts land is not part of
    the experiment's identity, so the same sweep written to two
    directories produces identical results files.
    """
    items = {
        f.name: _dataclass_repr(getattr(cfg, f.name))
        for f in fields(cfg)
        if f.name not in ("run_id", "out_dir")
    }
    blob = _canonical(items).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def _parse_dataset(d: dict) -> DataConfig:
    source = d.pop("source", None)
    if source is None:
        raise ConfigError("[dataset] requires source = \"csv\" or \"synthetic\"")
    if source == "csv":
        path = d.pop("path", None)
        schema = CsvSchema(
            date_column=d.pop("date_column", "date"),
            hour_column=d.pop("hour_column", "hour"),
            price_column=d.pop("price_column", "price"),
            feature_columns=tuple(d.pop("feature_columns", ())),
        )
        d.pop("synthetic", None)
        _no_leftovers("dataset", d)
        return DataConfig(source="csv", csv_path=path, schema=schema)
    if source == "synthetic":
        syn = dict(d.pop("synthetic", {}))
        _no_leftovers("dataset", d)
        kwargs = {}
        for key in (
            "n_days", "ar_coef", "exo_coef", "noise_scale", "shift_day",
            "shift_mean_mult", "shift_scale_mult", "spike_prob", "spike_scale",
            "seed", "exo_name",
        ):
            if key in syn:
                kwargs[key] = syn.pop(key)
        if "hours" in syn:
            kwargs["hours"] = tuple(int(h) for h in syn.pop("hours"))
        if "hourly_levels" in syn:
            kwargs["hourly_levels"] = tuple(float(v) for v in syn.pop("hourly_levels"))
        if "start_date" in syn:
            kwargs["start_date"] = _as_date(syn.pop("start_date"), "dataset.synthetic.start_date")
        _no_leftovers("dataset.synthetic", syn)
        return DataConfig(source="synthetic", synthetic=SyntheticConfig(**kwargs))
    raise ConfigError(f"dataset source must be csv or synthetic, got {source!r}")


def _parse_models(d: dict) -> ModelConfig:
    gb_raw = dict(d.pop("boosting", {}))
    gb_kwargs = {}
    for key in ("n_estimators", "max_depth", "learning_rate", "subsample_frac", "seed"):
        if key in gb_raw:
            gb_kwargs[key] = gb_raw.pop(key)
    _no_leftovers("quantile_models.boosting", gb_raw)
    cfg = ModelConfig(
        base_model=d.pop("base_model", "linear"),
        l1_penalty=float(d.pop("l1_penalty", 0.0)),
        lags=tuple(d.pop("lags", (1, 7))),
        solver_tol=float(d.pop("solver_tol", 1e-5)),
        boosting=GBHyper(**gb_kwargs),
    )
    _no_leftovers("quantile_models", d)
    return cfg


def config_from_dict(raw: dict) -> RunConfig:
    raw = {k: (dict(v) if isinstance(v, dict) else v) for k, v in raw.items()}
    pipe = raw.pop("pipeline", {})
    dataset = raw.pop("dataset", None)
    if dataset is None:
        raise ConfigError("missing [dataset] section")
    models = raw.pop("quantile_models", {})
    conf = raw.pop("conformal", {})
    agg = raw.pop("aggregation", {})
    ev = raw.pop("evaluation", {})
    grid = raw.pop("gridsearch", {})
    _no_leftovers("<top level>", raw)

    test_start = pipe.pop("test_start", None)
    if test_start is None:
        raise ConfigError("[pipeline] requires test_start")
    split = pipe.pop("split_date", None)
    kwargs = dict(
        data=_parse_dataset(dataset),
        test_start=_as_date(test_start, "pipeline.test_start"),
        split_date=_as_date(split, "pipeline.split_date") if split is not None else None,
        model=_parse_models(models),
    )
    for key in ("hours", "levels", "windows", "cal_fracs", "methods"):
        if key in pipe:
            kwargs[key] = tuple(pipe.pop(key))
    for key in ("seed", "out_dir", "run_id"):
        if key in pipe:
            kwargs[key] = pipe.pop(key)
    _no_leftovers("pipeline", pipe)

    refit = conf.pop("refit_every", 1)
    grid_raw = conf.pop("gamma_grid", None)
    kwargs["conformal"] = ConformalConfig(
        refit_every=None if refit in (0, "never", None) else int(refit),
        aci_gamma=float(conf.pop("aci_gamma", 0.01)),
        gamma_grid=tuple(grid_raw) if grid_raw else None,
        horizon=int(conf.pop("horizon", 1)),
    )
    _no_leftovers("conformal", conf)

    if "expert_windows" in agg:
        kwargs["expert_windows"] = tuple(agg.pop("expert_windows"))
    _no_leftovers("aggregation", agg)

    kwargs["evaluation"] = EvalConfig(
        n_boot=int(ev.pop("n_boot", 500)),
        block_len=int(ev.pop("block_len", 30)),
    )
    _no_leftovers("evaluation", ev)

    gkwargs = {}
    if "val_start" in grid:
        gkwargs["val_start"] = _as_date(grid.pop("val_start"), "gridsearch.val_start")
    for key in ("linear_l1", "gb_n_estimators", "gb_max_depth", "gb_learning_rate"):
        if key in grid:
            gkwargs[key] = tuple(grid.pop(key))
    _no_leftovers("gridsearch", grid)
    kwargs["grid"] = GridSearchConfig(**gkwargs)

    return RunConfig(**kwargs)


def load_config(path: str) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid TOML: {exc}") from exc
    return config_from_dict(raw)
