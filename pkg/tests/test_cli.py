import json
import os

import numpy as np
import pytest

from gridprice import cli
from gridprice.coordinator import CoordinationError
from gridprice.scenario import read_columns, write_columns

from tiny import small_scenario


@pytest.fixture(scope="module")
def scenario_path(tmp_path_factory):
    # the tight upper limit binds around midday
    return small_scenario(v_max=1.01).save(tmp_path_factory.mktemp("scenario"))


def run(args, environ=None):
    return cli.main(args, environ=environ or {})


def manifest(out):
    with open(os.path.join(out, "manifest.json")) as fh:
        return json.load(fh)


def test_validate_replica_succeeds(tmp_path):
    assert run(["validate", "--out", str(tmp_path)]) == 0
    doc = json.load(open(tmp_path / "validation.json"))
    assert doc["valid"] and doc["prosumers"] == ["P3", "P4", "P5", "P7", "P9"]
    assert manifest(tmp_path)["config"]["subcommand"] == "validate"


def test_invalid_scenario_lists_every_problem(scenario_path, tmp_path, capsys):
    doc = json.load(open(scenario_path))
    doc["colour"] = "red"
    doc["timeline"]["t9_s"] = 3
    bad = os.path.join(os.path.dirname(scenario_path), "bad.json")
    json.dump(doc, open(bad, "w"))
    assert run(["validate", "--scenario", bad, "--out", str(tmp_path)]) == cli.EXIT_INVALID
    err = json.load(open(tmp_path / "error.json"))
    assert err["error"] == "invalid_scenario" and len(err["problems"]) == 2
    assert json.loads(capsys.readouterr().err)["problems"] == err["problems"]
    assert not (tmp_path / "manifest.json").exists()


def test_unknown_keys_rejected_in_every_layer(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"rho0": 2.0, "speed": "fast"}))
    code = run(["validate", "--config", str(cfg), "--out", str(tmp_path)],
               environ={"GRIDPRICE_COLOUR": "red"})
    assert code == cli.EXIT_INVALID
    problems = json.load(open(tmp_path / "error.json"))["problems"]
    assert problems == ["unknown config key 'speed'", "unknown environment key 'colour'"]


def test_layer_precedence():
    cfg = cli.resolve_config("dayahead", {"rho0": 5.0}, environ={
        "GRIDPRICE_RHO0": "2", "GRIDPRICE_TOL_ABS": "1e-6", "GRIDPRICE_NO_COORDINATION": "1"})
    assert cfg.rho0 == 5.0 and cfg.tol_abs == 1e-6 and cfg.coordinate is False
    assert cfg.admm().eps_abs == 1e-6


@pytest.mark.parametrize("flags", [{"rho0": -1.0}, {"max_iter": 0}, {"rho_min": 10.0, "rho_max": 1.0}])
def test_bad_values_rejected(flags):
    with pytest.raises(cli.ConfigError):
        cli.resolve_config("dayahead", flags, environ={})


def test_bad_env_value_rejected():
    with pytest.raises(cli.ConfigError, match="not an integer"):
        cli.resolve_config("dayahead", {}, environ={"GRIDPRICE_MAX_ITER": "2.5"})


def test_uncoordinated_dayahead_reports_violations(scenario_path, tmp_path):
    out = str(tmp_path)
    assert run(["dayahead", "--scenario", scenario_path, "--out", out, "--no-coordination"]) == 0
    v = json.load(open(tmp_path / "violations.json"))
    assert {"v_max", "samples_above", "t_s_violated", "q_s_max_abs"} <= set(v)
    assert v["samples_above"] > 0
    assert not (tmp_path / "residuals.csv").exists()
    costs = read_columns(tmp_path / "costs.csv")
    np.testing.assert_array_equal(costs["difference"], 0.0)


@pytest.fixture(scope="module")
def full_runs(scenario_path, tmp_path_factory):
    outs = [str(tmp_path_factory.mktemp(f"full{k}")) for k in range(2)]
    for out in outs:
        assert run(["full", "--scenario", scenario_path, "--out", out, "--max-iter", "300"]) == 0
    return outs


def test_full_run_is_deterministic(full_runs):
    a, b = (manifest(o)["outputs"] for o in full_runs)
    assert a == b
    assert {"dayahead/schedules.csv", "dayahead/signals.csv", "dayahead/residuals.csv",
            "loop/trace.csv", "loop/cycles.csv", "loop/violations.json"} <= set(a)


def test_column_files_round_trip(full_runs, tmp_path):
    root = full_runs[0]
    names = [n for n in manifest(root)["outputs"] if n.endswith(".csv")]
    for name in names:
        src = os.path.join(root, name)
        dst = tmp_path / name.replace("/", "_")
        write_columns(dst, read_columns(src))
        assert open(src, "rb").read() == open(dst, "rb").read(), name


def test_manifest_reproduces_run(full_runs, tmp_path):
    first = full_runs[0]
    out = str(tmp_path / "again")
    assert run(["full", "--config", os.path.join(first, "manifest.json"), "--out", out]) == 0
    assert manifest(out)["outputs"] == manifest(first)["outputs"]
    assert manifest(out)["config"] == dict(manifest(first)["config"], out=out)


def test_coordinated_schedule_respects_voltage_limit(full_runs):
    v = json.load(open(os.path.join(full_runs[0], "dayahead", "violations.json")))
    assert v["v_max"] <= v["v_max_limit"] + 5e-3


def test_rt_tracks_day_ahead_without_replanning(scenario_path, tmp_path):
    assert run(["rt", "--scenario", scenario_path, "--out", str(tmp_path)]) == 0
    cycles = read_columns(tmp_path / "cycles.csv")
    np.testing.assert_array_equal(cycles["iterations"], 0)


def test_compare_totals(scenario_path, tmp_path):
    assert run(["compare", "--scenario", scenario_path, "--out", str(tmp_path)]) == 0
    t = read_columns(tmp_path / "costs.csv")
    assert list(t["prosumer"]) == ["PA", "PB", "total"]
    for col in ("without", "with", "difference", "compensation"):
        assert t[col][-1] == pytest.approx(t[col][:-1].sum(), abs=1e-12)
    assert np.all(t["difference"] >= -1e-6)


def test_rho_sweep_table(scenario_path, tmp_path):
    args = ["rho-sweep", "--scenario", scenario_path, "--out", str(tmp_path),
            "--rho-points", "3", "--sweep-iters", "20"]
    assert run(args) == 0
    t = read_columns(tmp_path / "rho_sweep.csv")
    assert list(t) == ["rho", "r", "s", "extra_fees", "max_violation"]
    np.testing.assert_allclose(t["rho"], [1e-2, 1.0, 1e2])


def test_runtime_failure_exit_code(scenario_path, tmp_path, monkeypatch, capsys):
    def boom(*a, **k):
        raise CoordinationError("agent PA failed at iteration 3")

    monkeypatch.setattr(cli, "run_day_ahead", boom)
    assert run(["dayahead", "--scenario", scenario_path, "--out", str(tmp_path)]) == cli.EXIT_RUNTIME
    err = json.loads(capsys.readouterr().err)
    assert err == json.load(open(tmp_path / "error.json"))
    assert err["error"] == "runtime_failure" and "iteration 3" in err["message"]
