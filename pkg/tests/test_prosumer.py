import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

import gridprice.prosumer as pm
from gridprice.coordinator import extract_price_signal, init_state
from gridprice.grid import OperatingPoint, assemble_dso_constraints, replica_network
from gridprice.prosumer import (
    BessSpec,
    PriceSignal,
    ProsumerSpec,
    build_prosumer_problem,
    interleave,
    local_cost_min,
    rt_control,
    soc_trajectory,
    tariff_vector,
    x_update,
)

BESS = BessSpec(2.5, 2.5, 0.1, 0.9, 0.5)
SPEC = ProsumerSpec("P9", "N9", BESS)
P_BOX = 2.5 / math.sqrt(2)


def diurnal(K, dt):
    h = np.arange(K) * dt
    pv = np.clip(4.0 * np.sin(np.pi * (h - 6) / 14), 0, None) * ((h > 6) & (h < 20))
    load = 0.4 + 0.8 * np.exp(-0.5 * ((h - 19) / 1.5) ** 2)
    return load, pv


def test_box_bound_from_rating():
    assert BESS.p_box == pytest.approx(1.76776695, abs=1e-8)
    pr = build_prosumer_problem(SPEC, np.zeros(3), np.zeros(3), 1 / 6)
    assert pr.ub[0] == pytest.approx(P_BOX) and pr.lb[1] == pytest.approx(-P_BOX)


def test_soc_recursion_hand_value():
    soc = soc_trajectory(0.5, [2.5], 1 / 6, 2.5)
    assert soc[1] - soc[0] == pytest.approx(-1 / 6)


@pytest.mark.parametrize("kw", [dict(soc_min=0.9, soc_max=0.1), dict(s_max=0.0, e_max=1.0),
                                dict(soc_init=0.95)])
def test_bess_invariants(kw):
    args = dict(s_max=2.5, e_max=2.5, soc_min=0.1, soc_max=0.9, soc_init=0.5)
    args.update(kw)
    with pytest.raises(ValueError):
        BessSpec(**args)


def test_mismatched_series_rejected():
    with pytest.raises(ValueError, match="same length"):
        build_prosumer_problem(SPEC, np.zeros(3), np.zeros(4), 1 / 6)


def test_null_schedule_is_feasible_and_chosen_under_zero_price():
    pr = build_prosumer_problem(SPEC, np.zeros(4), np.zeros(4), 1 / 6)
    x, sched, cost = local_cost_min(pr, np.zeros(8))
    np.testing.assert_allclose(x, 0, atol=1e-7)
    assert pr.check_schedule(sched) == []


def test_degenerate_signal_matches_local_minimum():
    load, pv = diurnal(24, 1.0)
    pr = build_prosumer_problem(SPEC, load, pv, 1.0)
    c = tariff_vector(np.where(np.arange(24) < 13, 0.12, 0.30), 1.0)
    a = x_update(pr, PriceSignal(sp.csr_matrix((48, 48)), c.copy(), 0.0))
    b = local_cost_min(pr, c)
    np.testing.assert_allclose(a[0], b[0], atol=1e-9)


def test_two_step_charge_then_discharge_at_box_bound():
    spec = ProsumerSpec("P", "N", BessSpec(2.5, 2.5, 0.1, 0.9, 0.1))
    pr = build_prosumer_problem(spec, np.zeros(2), np.zeros(2), 0.25)
    _, sched, _ = local_cost_min(pr, tariff_vector([0.1, 0.3], 0.25))
    np.testing.assert_allclose(sched.p_b, [-P_BOX, P_BOX], atol=1e-7)
    np.testing.assert_allclose(sched.soc[[0, 2]], [0.1, 0.1], atol=1e-9)


def test_negative_midday_price_makes_battery_charge():
    K = 24
    load, pv = diurnal(K, 1.0)
    pr = build_prosumer_problem(SPEC, load, pv, 1.0)
    g = tariff_vector(np.full(K, 0.2), 1.0)
    g[2 * 12:2 * 14:2] = -0.5
    _, sched, _ = x_update(pr, PriceSignal(sp.csr_matrix((2 * K, 2 * K)), g, 0.0))
    assert np.all(sched.p_b[12:14] < -0.5)


def test_tou_price_charges_low_and_discharges_high():
    K = 144
    dt = 1 / 6
    load, pv = diurnal(K, dt)
    hours = np.arange(K) * dt
    pr = build_prosumer_problem(SPEC, load, pv, dt)
    _, sched, _ = local_cost_min(pr, tariff_vector(np.where(hours < 13, 0.12, 0.30), dt))
    low, high = hours < 13, hours >= 13
    assert sched.p_b[low].sum() < -1.0  # net charging
    assert sched.p_b[high].sum() > 1.0
    assert sched.soc.max() == pytest.approx(0.9, abs=1e-6)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2 ** 31))
def test_pv_never_curtailed_under_nonnegative_prices(seed):
    rng = np.random.default_rng(seed)
    K = 12
    load, pv = rng.uniform(0, 2, K), rng.uniform(0, 5, K)
    pr = build_prosumer_problem(SPEC, load, pv, 0.5)
    _, sched, _ = local_cost_min(pr, tariff_vector(rng.uniform(0, 0.4, K), 0.5))
    np.testing.assert_allclose(sched.p_pv, pv, atol=1e-6)


def test_regularizer_shifts_cost_by_less_than_a_tenth_of_a_rappen(monkeypatch):
    K = 144
    dt = 1 / 6
    load, pv = diurnal(K, dt)
    c = tariff_vector(np.where(np.arange(K) * dt < 13, 0.12, 0.30), dt)
    pr = build_prosumer_problem(SPEC, load, pv, dt)
    with_reg = float(c @ local_cost_min(pr, c)[0])
    monkeypatch.setattr(pm, "REGULARIZATION", 0.0)
    pr = build_prosumer_problem(SPEC, load, pv, dt)
    exact = float(c @ local_cost_min(pr, c)[0])
    assert abs(with_reg - exact) <= 1e-4


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2 ** 31), rho=st.floats(0.01, 100.0))
def test_x_update_schedules_respect_every_constraint(seed, rho):
    rng = np.random.default_rng(seed)
    K = 6
    load, pv = rng.uniform(0, 2, K), rng.uniform(0, 4, K)
    pr = build_prosumer_problem(SPEC, load, pv, 1 / 6, soc_init=rng.uniform(0.1, 0.9))
    A = sp.random(5, 2 * K, density=0.5, random_state=rng.integers(2 ** 31), format="csr")
    H = (A.T @ A) * rho
    g = rng.normal(0, 0.1, 2 * K)
    x, sched, cost = x_update(pr, PriceSignal(H, g, 0.0))
    assert pr.check_schedule(sched) == []
    np.testing.assert_allclose(x, interleave(load - sched.p_pv - sched.p_b, -sched.q_b), atol=1e-9)
    parts = sched.resource_demands(load, np.zeros(K))
    np.testing.assert_allclose(sum(parts.values()), x, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 31), rho=st.floats(1e-3, 1e3))
def test_advertised_cost_identity(seed, rho):
    rng = np.random.default_rng(seed)
    m = replica_network()
    att = ("N3", "N9")
    lin = assemble_dso_constraints(m, OperatingPoint.zeros(m, 2), att)
    state = init_state(lin, [np.zeros(4), np.zeros(4)], rho)
    state.y = [rng.standard_normal(lin.m) for _ in att]
    state.z = [rng.standard_normal(lin.m) for _ in att]
    c = rng.uniform(0, 0.1, 4)
    sig = extract_price_signal(state, 1, c)
    x = rng.uniform(-5, 5, 4)
    Ai = lin.block(1)
    r = Ai @ x - state.z[1]
    direct = c @ x + state.y[1] @ r + 0.5 * rho * r @ r
    assert sig.cost(x) == pytest.approx(direct, rel=1e-9, abs=1e-9)
    assert np.all(np.linalg.eigvalsh(sig.H.toarray()) >= -1e-9)


# -- real-time tracking --------------------------------------------------------

def test_rt_on_target_returns_zero():
    p_b, q_b = rt_control(BESS, 0.5, 1.2 - 0.8, 0.0, 1.2, 0.0, 0.8, 0.0, 30 / 3600)
    assert abs(p_b) < 1e-9 and abs(q_b) < 1e-9


def test_rt_reaches_reachable_target_exactly():
    p_b, q_b = rt_control(BESS, 0.5, 0.0, -0.3, 1.0, 0.2, 0.5, 0.0, 30 / 3600)
    # p = 1.0 - 0.5 - p_b = 0  and  q = 0.2 - q_b = -0.3
    assert p_b == pytest.approx(0.5, abs=1e-8)
    assert q_b == pytest.approx(0.5, abs=1e-8)


def test_rt_saturates_at_box():
    p_b, q_b = rt_control(BESS, 0.5, -5.0, 3.0, 0.0, 0.0, 0.0, 0.0, 30 / 3600)
    assert p_b == pytest.approx(P_BOX) and q_b == pytest.approx(-P_BOX)


def test_rt_full_battery_refuses_to_charge():
    p_b, _ = rt_control(BESS, 0.9, 2.0, 0.0, 0.5, 0.0, 0.0, 0.0, 30 / 3600)
    assert p_b == pytest.approx(0.0, abs=1e-9)


def test_rt_curtailment_applies_to_pv_forecast():
    # half of 2 kW is curtailed, so tracking p = 0 needs p_b = 0.5 - 1.0
    p_b, _ = rt_control(BESS, 0.5, 0.0, 0.0, 0.5, 0.0, 2.0, 0.5, 30 / 3600)
    assert p_b == pytest.approx(-0.5, abs=1e-8)


def test_rt_state_out_of_bounds():
    with pytest.raises(ValueError, match="state out of bounds"):
        rt_control(BESS, 0.95, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 30 / 3600)


@settings(max_examples=60, deadline=None)
@given(soc=st.floats(0.1, 0.9), target=st.floats(-10, 10), dt=st.floats(1e-3, 1.0))
def test_rt_respects_one_step_soc_window(soc, target, dt):
    p_b, q_b = rt_control(BESS, soc, target, 0.0, 0.0, 0.0, 0.0, 0.0, dt)
    nxt = soc - dt / BESS.e_max * p_b
    assert BESS.soc_min - 1e-12 <= nxt <= BESS.soc_max + 1e-12
    assert abs(p_b) <= P_BOX + 1e-12 and abs(q_b) <= P_BOX + 1e-12
