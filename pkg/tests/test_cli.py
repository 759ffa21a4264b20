"""CLI surface: subcommands, overrides, exit codes."""

import json
import textwrap
from pathlib import Path

import pytest

from bandcast.cli import build_parser, main

CFG_TOML = """
[pipeline]
hours = [3, 13]
levels = [0.8]
windows = [120]
cal_fracs = [0.5]
methods = ["osscp"]
test_start = 2016-07-01
seed = 11
out_dir = "%OUT%"

[dataset]
source = "synthetic"

[dataset.synthetic]
n_days = 260
hours = [3, 13]
ar_coef = 0.6
exo_coef = 1.0
noise_scale = 2.0
seed = 7
start_date = 2016-01-01

[evaluation]
n_boot = 20

[gridsearch]
val_start = 2016-05-01
linear_l1 = [0.0, 1.0]
"""


@pytest.fixture()
def config_file(tmp_path):
    out = tmp_path / "artifacts"
    path = tmp_path / "run.toml"
    path.write_text(textwrap.dedent(CFG_TOML.replace("%OUT%", str(out))))
    return path, out


def test_parser_requires_a_subcommand():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])


def test_backtest_success_exit_zero(config_file, capsys):
    path, out = config_file
    code = main(["backtest", "--config", str(path)])
    assert code == 0
    assert (out / "results.csv").exists()
    stdout = capsys.readouterr().out
    assert "result rows" in stdout
    assert "hygiene violations: 0" in stdout


def test_backtest_cell_failure_exit_one(config_file, tmp_path, capsys):
    path, out = config_file
    body = path.read_text().replace("windows = [120]", "windows = [120, 10000]")
    bad = tmp_path / "bad.toml"
    bad.write_text(body)
    code = main(["backtest", "--config", str(bad)])
    assert code == 1
    err = capsys.readouterr().err
    assert "cell(s) failed" in err
    assert "window=10000" in err


def test_config_error_exit_two(tmp_path, capsys):
    missing = tmp_path / "absent.toml"
    assert main(["backtest", "--config", str(missing)]) == 2
    assert "error:" in capsys.readouterr().err
    bad = tmp_path / "bad.toml"
    bad.write_text("[pipeline]\ntest_start = 2016-07-01\nbogus = 1\n"
                   "[dataset]\nsource = \"csv\"\npath = \"p.csv\"\n")
    assert main(["backtest", "--config", str(bad)]) == 2


def test_cli_overrides_change_run(config_file, tmp_path, capsys):
    path, _ = config_file
    moved = tmp_path / "moved"
    code = main([
        "backtest", "--config", str(path), "--out", str(moved),
        "--hours", "3", "--seed", "5",
    ])
    assert code == 0
    assert (moved / "results.csv").exists()
    rows = (moved / "results.csv").read_text().splitlines()[1:]
    hours = {line.split(",")[6] for line in rows}
    assert hours == {"3"}


def test_bad_hours_override_exit_two(config_file, capsys):
    path, _ = config_file
    assert main(["backtest", "--config", str(path), "--hours", "3,x"]) == 2
    assert "--hours" in capsys.readouterr().err


def test_synth_writes_csv(config_file, tmp_path, capsys):
    path, _ = config_file
    dest = tmp_path / "panel.csv"
    code = main(["synth", "--config", str(path), "--file", str(dest)])
    assert code == 0
    header = dest.read_text().splitlines()[0]
    assert header.startswith("date,hour,price")
    assert "260 days" in capsys.readouterr().out


def test_gridsearch_prints_selection(config_file, capsys):
    path, _ = config_file
    code = main(["gridsearch", "--config", str(path)])
    assert code == 0
    out = capsys.readouterr().out
    assert "selected linear" in out
    assert "l1_penalty" in out


def test_report_from_results_csv(config_file, tmp_path, capsys):
    path, out = config_file
    assert main(["backtest", "--config", str(path)]) == 0
    report_dir = tmp_path / "report"
    code = main([
        "report", "--results", str(out / "results.csv"),
        "--out", str(report_dir), "--format", "json", "--plot-data",
        "--weights", str(out / "weights.csv"),
    ])
    assert code == 0
    data = json.loads((report_dir / "results.json").read_text())
    assert data["rows"]
    assert (report_dir / "plot_coverage.csv").exists()


def test_report_requires_results_and_out():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["report", "--out", "somewhere"])
    with pytest.raises(SystemExit):
        build_parser().parse_args(["report", "--results", "r.csv"])


def test_report_missing_results_file_exit_two(tmp_path, capsys):
    code = main([
        "report", "--results", str(tmp_path / "nope.csv"), "--out", str(tmp_path),
    ])
    assert code == 2
