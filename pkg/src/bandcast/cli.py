"""Command-line entry point.

Subcommands:
    backtest    run the configured method sweep, write artifacts
    gridsearch  select base-model hyperparameters on the validation range
    synth       generate a synthetic panel and write it as CSV
    report      reshape results into tidy metrics / plot data

Exit codes: 0 success, 1 one or more cells failed, 2 configuration or
schema error.
"""

from __future__ import annotations

import argparse
import sys

from .config import load_config
from .errors import ConfigError, SchemaError
from .pipeline import emit_report, grid_search, run_backtest

__all__ = ["main", "build_parser"]


def _parse_hours(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError as exc:
        raise ConfigError(f"--hours expects comma-separated integers, got {text!r}") from exc


def _parse_levels(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(part) for part in text.split(",") if part.strip())
    except ValueError as exc:
        raise ConfigError(f"--levels expects comma-separated floats, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bandcast",
        description="Online conformal prediction intervals for day-ahead prices.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, needs_config=True):
        p.add_argument("--config", required=needs_config, help="TOML config file")
        p.add_argument("--seed", type=int, default=None, help="override pipeline seed")
        p.add_argument("--out", default=None, help="override output directory")

    p = sub.add_parser("backtest", help="run the configured backtest sweep")
    add_common(p)
    p.add_argument("--hours", default=None, help="override hours, e.g. 3,8,13")
    p.add_argument("--levels", default=None, help="override target levels, e.g. 0.9,0.95")

    p = sub.add_parser("gridsearch", help="hyperparameter selection on the validation range")
    add_common(p)

    p = sub.add_parser("synth", help="write the configured synthetic panel as CSV")
    add_common(p)
    p.add_argument("--file", default=None, help="output CSV path (default <out_dir>/prices.csv)")

    p = sub.add_parser("report", help="tidy metrics and plot data from a results file")
    p.add_argument("--results", required=True, help="results.csv from a backtest run")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--plot-data", action="store_true", help="also write plot series files")
    p.add_argument("--weights", default=None, help="weights.csv to include as plot data")
    return parser


def _load_with_overrides(args) -> "RunConfig":
    cfg = load_config(args.config)
    return cfg.with_overrides(
        seed=args.seed,
        out_dir=args.out,
        hours=_parse_hours(args.hours) if getattr(args, "hours", None) else None,
        levels=_parse_levels(args.levels) if getattr(args, "levels", None) else None,
    )


def _cmd_backtest(args) -> int:
    cfg = _load_with_overrides(args)
    result = run_backtest(cfg)
    print(f"run {cfg.run_id}: {len(result.rows)} result rows in {result.wall_time_s:.1f}s")
    print(f"hygiene violations: {result.hygiene_violations}")
    for name, path in sorted(result.paths.items()):
        print(f"  {name}: {path}")
    if result.failures:
        print(f"{len(result.failures)} cell(s) failed:", file=sys.stderr)
        for f in result.failures:
            print(
                f"  hour={f.hour} method={f.method} window={f.window} "
                f"cal_frac={f.cal_frac:g}: {f.error}",
                file=sys.stderr,
            )
        return 1
    return 0


def _cmd_gridsearch(args) -> int:
    cfg = _load_with_overrides(args)
    selection = grid_search(cfg)
    print(f"selected {selection['base_model']}: {selection['selected']}")
    for cand in selection["candidates"]:
        print(f"  {cand['params']} -> {cand['score']:.6f}")
    return 0


def _cmd_synth(args) -> int:
    from pathlib import Path

    from .pipeline import _load_panel, write_panel_csv

    cfg = _load_with_overrides(args)
    if cfg.data.source != "synthetic":
        raise ConfigError("synth requires dataset source = \"synthetic\"")
    panel, _ = _load_panel(cfg)
    out = Path(args.file) if args.file else Path(cfg.out_dir) / "prices.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_panel_csv(panel, str(out))
    print(f"wrote {len(panel.days)} days x {len(panel.hours)} hours to {out}")
    return 0


def _cmd_report(args) -> int:
    paths = emit_report(
        args.results, args.out, fmt=args.format,
        plot_data=args.plot_data, weights_path=args.weights,
    )
    for name, path in sorted(paths.items()):
        print(f"  {name}: {path}")
    return 0


_COMMANDS = {
    "backtest": _cmd_backtest,
    "gridsearch": _cmd_gridsearch,
    "synth": _cmd_synth,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, SchemaError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
