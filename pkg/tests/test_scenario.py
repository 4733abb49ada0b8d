import json
import os
from dataclasses import replace

import numpy as np
import pytest

from gridprice.scenario import (
    ScenarioError,
    TimelineConfig,
    format_number,
    load_scenario,
    replica_scenario,
)

SHORT = TimelineConfig(dt_plan_s=3600, t1_s=3600, t2_s=900, start_s=36000, end_s=46800)


@pytest.fixture(scope="module")
def replica():
    return replica_scenario(timeline=SHORT)


def read_dir(d):
    return {f: open(os.path.join(d, f), "rb").read() for f in sorted(os.listdir(d))}


def test_save_load_save_is_byte_identical(replica, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    path = replica.save(a)
    loaded = load_scenario(path)
    loaded.save(b)
    assert read_dir(a) == read_dir(b)
    np.testing.assert_array_equal(loaded.load_realized, replica.load_realized)
    np.testing.assert_array_equal(loaded.slack_realized, replica.slack_realized)
    assert loaded.timeline == replica.timeline and loaded.names == replica.names


def test_format_number_round_trips():
    for v in [0.1, 1 / 3, -2.5e-17, 1e300, 0.0]:
        assert float(format_number(v)) == v


def test_validation_lists_every_problem(replica):
    bad = replace(replica, tariff=np.zeros(3), pv_realized=-replica.pv_realized,
                  slack_realized=np.zeros(replica.timeline.n_rt))
    errs = bad.validate()
    assert any("tariff length" in e for e in errs)
    assert any("pv_realized has negative" in e for e in errs)
    assert any("slack voltage" in e for e in errs)


def test_prosumer_on_unknown_bus_rejected(replica):
    pros = list(replica.prosumers)
    pros[0] = replace(pros[0], bus="N42")
    assert any("unknown or slack bus N42" in e for e in replace(replica, prosumers=pros).validate())


def test_unknown_keys_rejected(replica, tmp_path):
    path = replica.save(tmp_path)
    doc = json.load(open(path))
    doc["colour"] = "blue"
    doc["timeline"]["t3_s"] = 1
    json.dump(doc, open(path, "w"))
    with pytest.raises(ScenarioError) as exc:
        load_scenario(path)
    assert exc.value.problems == ["unknown scenario key 'colour'", "unknown timeline key 't3_s'"]


@pytest.mark.parametrize("kw", [dict(t1_s=600, t2_s=45), dict(dt_plan_s=1200),
                                dict(start_s=36000, end_s=36000), dict(start_s=36300)])
def test_timeline_invariants(kw):
    with pytest.raises(ValueError):
        TimelineConfig(**kw)


def test_replica_day_is_deterministic_and_sized():
    a, b = replica_scenario(seed=7), replica_scenario(seed=7)
    tl = a.timeline
    assert a.load_realized.shape == (5, tl.n_rt) and a.tariff.shape == (tl.K,)
    np.testing.assert_array_equal(a.load_realized, b.load_realized)
    assert not np.array_equal(a.load_realized, replica_scenario(seed=8).load_realized)
    np.testing.assert_allclose(a.pv_realized, 0.9 * a.pv_forecast)
    assert a.validate() == []


def test_plan_mean_averages_each_step(replica):
    r = replica.timeline.rt_per_plan
    m = replica.plan_mean(replica.load_forecast)
    assert m[2, 5] == pytest.approx(replica.load_forecast[2, 5 * r:6 * r].mean())
