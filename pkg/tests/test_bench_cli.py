"""Error metric, configs, report files, K^{-1} timing and the CLI."""

import csv
import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import yaml
from hypothesis import given
from hypothesis import strategies as st

from kppinn.bench import (
    RESULT_COLUMNS,
    ConfigError,
    RunReport,
    emit_report,
    load_config,
    mean_and_se,
    parse_config,
    read_results,
    relative_l2_error,
    run_experiment,
    time_kinverse,
)
from kppinn.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, main
from kppinn.kernel_core import Grid1D, MaternParams, kernel_matrix

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

TINY = {
    "problem": "stiff",
    "seeds": [0, 1],
    "grid": {"n_interior": 10, "n_test": 40},
    "network": {"hidden": [6]},
    "losses": [{"kind": "l2"}, {"kind": "rkhs_kp", "nu": 0.5}],
    "train": {"n_iter": 20, "log_every": 5},
}


def write_yaml(path, data):
    path.write_text(yaml.safe_dump(data))
    return path


# ---------------------------------------------------------------- metric


def test_metric_examples():
    t = np.array([1.0, -2.0, 3.0])
    assert relative_l2_error(t, t) == 0.0
    assert relative_l2_error(np.zeros(3), t) == 1.0
    assert relative_l2_error(1.1 * t, t) == pytest.approx(0.1, rel=1e-12)


def test_metric_errors():
    with pytest.raises(ValueError):
        relative_l2_error([1.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        relative_l2_error([], [])
    with pytest.raises(ZeroDivisionError):
        relative_l2_error([1.0], [0.0])


@given(st.integers(0, 10**6))
def test_metric_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    p, t = rng.standard_normal(20), rng.standard_normal(20)
    perm = rng.permutation(20)
    assert relative_l2_error(p[perm], t[perm]) == pytest.approx(relative_l2_error(p, t), rel=1e-14)


def test_mean_and_se():
    assert mean_and_se([1.0, 2.0, 3.0]) == pytest.approx((2.0, 1.0 / np.sqrt(3)))
    assert mean_and_se([0.5]) == (0.5, 0.0)
    assert mean_and_se([None]) == (None, None)


# ---------------------------------------------------------------- configs


@pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.yaml")), ids=lambda p: p.name)
def test_shipped_configs_parse(path):
    cfg = load_config(path)
    assert cfg.losses


@pytest.mark.parametrize(
    "patch, where",
    [
        ({"problem": "burgers"}, "problem"),
        ({"seeds": [-1]}, "seeds"),
        ({"grid": {"n_boundary": 30}}, "grid"),
        ({"losses": [{"kind": "l2"}, {"kind": "huber"}]}, "losses[1].kind"),
        ({"losses": [{"kind": "rkhs_kp", "nu": 0.7}]}, "losses[0]"),
        ({"losses": [{"kind": "l2", "extra": 1}]}, "losses[0].extra"),
        ({"train": {"lr": -1}}, "train"),
        ({"train": {"momentum": 0.9}}, "train.momentum"),
        ({"network": {"hidden": [0]}}, "network.hidden"),
        ({"colour": "blue"}, "colour"),
    ],
)
def test_config_errors_carry_paths(patch, where):
    data = {"problem": "helmholtz", "grid": {"n_interior": [6, 6], "n_boundary": 20, "n_test": [3, 3]}}
    data.update(patch)
    with pytest.raises(ConfigError) as info:
        parse_config(data)
    assert info.value.path == where


def test_sobolev_order_three_is_skipped():
    cfg = parse_config({"problem": "stiff", "grid": {"n_interior": 8, "n_test": 10},
                        "losses": [{"kind": "sobolev", "order": 3}]})
    rep = run_experiment(cfg, cfg.losses[0])
    assert rep.status == ["skipped"] * 3 and rep.mean is None


def test_dense_cap_gives_skipped_rows():
    cfg = parse_config({"problem": "helmholtz", "seeds": [0],
                        "grid": {"n_interior": [8, 8], "n_boundary": 20, "n_test": [3, 3]},
                        "losses": [{"kind": "rkhs_dense", "nu": 0.5, "dense_cap": 10}], "train": {"n_iter": 2}})
    rep = run_experiment(cfg, cfg.losses[0])
    assert rep.status == ["skipped"] and "DenseCapError" in rep.messages[0]


# ---------------------------------------------------------------- reports


def _report(cfg, idx=0):
    traces = {}
    return run_experiment(cfg, cfg.losses[idx], traces=traces), traces


def test_report_round_trip_and_rows(tmp_path):
    cfg = parse_config(TINY)
    rep, traces = _report(cfg)
    emit_report(rep, tmp_path, traces)
    back = RunReport.from_json(json.loads((tmp_path / "report.json").read_text()))
    assert back == rep
    rows = read_results(tmp_path / "results.csv")
    assert [r["seed"] for r in rows] == ["0", "1"]
    assert list(rows[0]) == list(RESULT_COLUMNS)
    with open(tmp_path / "trace_0.csv") as fh:
        trace = list(csv.DictReader(fh))
    assert trace[0]["iter"] == "0" and trace[-1]["iter"] == "19"


def test_results_upsert(tmp_path):
    cfg = parse_config(TINY)
    rep, _ = _report(cfg)
    emit_report(rep, tmp_path)
    emit_report(rep, tmp_path)
    assert len(read_results(tmp_path / "results.csv")) == 2
    other, _ = _report(cfg, 1)
    emit_report(other, tmp_path / "kp", results_csv=tmp_path / "results.csv")
    rows = read_results(tmp_path / "results.csv")
    assert len(rows) == 4 and {r["loss"] for r in rows} == {"L2", "KP nu=0.5"}


def test_runs_are_deterministic_except_wall_time(tmp_path):
    cfg = parse_config(TINY)
    a, b = _report(cfg)[0].to_json(), _report(cfg)[0].to_json()
    a.pop("wall_s"), b.pop("wall_s")
    assert a == b


def test_io_error_is_reported(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    rep, _ = _report(replace(parse_config(TINY), seeds=(0,)))
    with pytest.raises(OSError):
        emit_report(rep, blocker / "sub")


# ---------------------------------------------------------------- timing


@pytest.mark.parametrize("nu", [0.5, 1.5, 2.5])
def test_time_kinverse_methods_agree(nu):
    p = MaternParams(nu, 1.0)
    s = p.packet_width
    for n in (s, 50):
        kp = time_kinverse(n, p, "kp", repeats=1)
        dense = time_kinverse(n, p, "dense", repeats=1)
        assert kp.value == pytest.approx(dense.value, rel=1e-7)
    g = Grid1D(np.linspace(0, 4.9, 50))
    y = np.random.default_rng(0).standard_normal(50)
    assert kp.value == pytest.approx(y @ np.linalg.solve(kernel_matrix(p, g), y), rel=1e-7)


def test_time_kinverse_tensor():
    kp = time_kinverse("12x9", MaternParams(1.5, 1.0), "kp", repeats=1)
    dense = time_kinverse("12x9", MaternParams(1.5, 1.0), "dense", repeats=1)
    assert kp.n == 108 and kp.value == pytest.approx(dense.value, rel=1e-7)
    assert len(kp.times) == 1 and kp.median == kp.min


# ---------------------------------------------------------------- CLI


def test_cli_dry_run(tmp_path, capsys):
    cfg = write_yaml(tmp_path / "c.yaml", TINY)
    assert main(["solve", str(cfg), "--dry-run", "--out", str(tmp_path / "o")]) == EXIT_OK
    rows = read_results(tmp_path / "o" / "results.csv")
    assert {r["iters"] for r in rows} == {"2"}
    assert (tmp_path / "o" / "l2" / "report.json").exists()
    assert (tmp_path / "o" / "kp_nu_0.5" / "trace_1.csv").exists()
    assert "stiff forward L2" in capsys.readouterr().out


def test_cli_inverse_seed_override(tmp_path, capsys):
    data = dict(TINY, losses=[{"kind": "l2"}])
    cfg = write_yaml(tmp_path / "c.yaml", data)
    assert main(["inverse", str(cfg), "--dry-run", "--seeds", "3", "--out", str(tmp_path / "o")]) == EXIT_OK
    rows = read_results(tmp_path / "o" / "results.csv")
    assert [(r["mode"], r["seed"]) for r in rows] == [("inverse", "3")]
    assert "theta=" in capsys.readouterr().out


def test_cli_validate(tmp_path, capsys):
    assert main(["validate", str(CONFIGS / "stiff_desk.yaml")]) == EXIT_OK
    bad = write_yaml(tmp_path / "bad.yaml", {"problem": "stiff", "seeds": "all"})
    assert main(["validate", str(bad)]) == EXIT_CONFIG
    assert "seeds" in capsys.readouterr().err
    (tmp_path / "broken.yaml").write_text("problem: [unclosed\n")
    assert main(["validate", str(tmp_path / "broken.yaml")]) == EXIT_CONFIG


def test_cli_missing_file_is_io_error(tmp_path):
    assert main(["validate", str(tmp_path / "absent.yaml")]) == EXIT_IO


def test_cli_bench(tmp_path, capsys):
    assert main(["bench-kinv", "--n", "40", "--nu", "1.5", "--repeats", "1", "--out", str(tmp_path)]) == EXIT_OK
    payload = json.loads((tmp_path / "kinv.json").read_text())
    assert [p["method"] for p in payload] == ["kp", "dense"]
    assert payload[0]["value"] == pytest.approx(payload[1]["value"], rel=1e-7)
    assert "speedup" in capsys.readouterr().out


def test_cli_usage_errors():
    with pytest.raises(SystemExit):
        main(["solve"])
    with pytest.raises(SystemExit):
        main(["solve", "x.yaml", "--seeds", "a,b"])
