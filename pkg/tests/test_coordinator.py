import json
from dataclasses import dataclass

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from gridprice.coordinator import (
    CONVERGED,
    AdmmConfig,
    AdmmState,
    CoordinationError,
    adapt_rho,
    compute_compensation,
    dual_update,
    extract_price_signal,
    init_state,
    residuals,
    run_coordination,
    solve_centralized,
    z_update,
    z_update_qp,
)
from gridprice.grid import GridLimits, assemble_dso_constraints, demand_to_operating_point
from gridprice.prosumer import ProsumerError

from tiny import tiny_instance


@dataclass
class RowStub:
    """Minimal stand-in for the linearized constraints: A_i = rows of ``blocks[i]``."""

    blocks: list
    b: np.ndarray

    @property
    def m(self):
        return self.b.size

    @property
    def n_prosumers(self):
        return len(self.blocks)

    def block(self, i):
        return self.blocks[i]

    def gram(self, i):
        A = self.blocks[i]
        return A.T.tocsr(), (A.T @ A).tocsr()


def stub_state(x, blocks, b, rho=1.0, y=None):
    lin = RowStub([sp.csr_matrix(B) for B in blocks], np.asarray(b, dtype=float))
    st_ = init_state(lin, [np.asarray(v, dtype=float) for v in x], rho)
    if y is not None:
        st_.y = [np.asarray(v, dtype=float) for v in y]
    return st_


# -- z-update -------------------------------------------------------------------

def test_one_row_projection_splits_excess_equally():
    s = stub_state([[1.0], [1.0]], [[[1.0]], [[1.0]]], [1.0])
    z = z_update(s, s.x)
    np.testing.assert_allclose(z, [[0.5], [0.5]])


def test_inactive_row_keeps_contributions():
    s = stub_state([[0.2], [0.3]], [[[1.0]], [[1.0]]], [1.0], y=[[0.1], [0.0]])
    z = z_update(s, s.x)
    np.testing.assert_allclose(z, [[0.3], [0.3]])


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2 ** 31), n=st.integers(1, 4), m=st.integers(1, 5),
       rho=st.floats(0.01, 100.0))
def test_closed_form_matches_qp_route(seed, n, m, rho):
    rng = np.random.default_rng(seed)
    blocks = [rng.normal(size=(m, 3)) for _ in range(n)]
    x = [rng.normal(size=3) for _ in range(n)]
    y = [rng.normal(size=m) for _ in range(n)]
    s = stub_state(x, blocks, rng.normal(size=m), rho, y)
    a, b = z_update(s, x), z_update_qp(s, x)
    for za, zb in zip(a, b):
        np.testing.assert_allclose(za, zb, atol=1e-7)
    assert np.all(sum(a) <= s.lin.b + 1e-10)


# -- dual update, residuals, penalty ----------------------------------------------

def test_dual_update_examples():
    s = stub_state([[1.0]], [[[1.0]]], [5.0], rho=2.0)
    assert dual_update(s, [np.array([1.0])], [np.array([0.5])])[0][0] == pytest.approx(1.0)
    # a satisfied copy leaves the multiplier unchanged
    assert dual_update(s, [np.array([1.0])], [np.array([1.0])])[0][0] == 0.0


def test_residual_examples():
    s = stub_state([[0.0, 0.0]], [[[1.0, 0.0], [0.0, 1.0]]], [1.0, 1.0], rho=3.0)
    x = [np.array([3.0, 4.0])]
    res = residuals(s, x, [np.zeros(2)], [np.array([0.0, 1.0])], s.y)
    assert res.r_max == pytest.approx(5.0)
    assert res.s_max == pytest.approx(3.0)


@pytest.mark.parametrize("r,s,expected", [(10.0, 0.5, 1.01), (0.5, 10.0, 1 / 1.01), (1.0, 2.0, 1.0)])
def test_adapt_rho_balances_residuals(r, s, expected):
    assert adapt_rho(1.0, r, s, AdmmConfig()) == pytest.approx(expected)


def test_adapt_rho_disabled():
    assert adapt_rho(2.0, 1e3, 0.0, AdmmConfig(adaptive=False)) == 2.0


# -- price signal -------------------------------------------------------------------

def test_price_signal_gradient_at_the_copy_is_tariff_plus_dual():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(3, 4))
    x = rng.normal(size=4)
    s = stub_state([x], [A], np.ones(3), rho=5.0, y=[rng.normal(size=3)])
    s.z = [A @ x]
    c = rng.uniform(0, 1, 4)
    sig = extract_price_signal(s, 0, c)
    np.testing.assert_allclose(sig.marginal_price(x), c + A.T @ s.y[0], atol=1e-12)


def test_vanishing_penalty_leaves_linear_grid_price():
    rng = np.random.default_rng(1)
    A = rng.normal(size=(3, 4))
    s = stub_state([np.zeros(4)], [A], np.ones(3), rho=1e-12, y=[rng.normal(size=3)])
    s.z = [rng.normal(size=3)]
    c = rng.uniform(0, 1, 4)
    sig = extract_price_signal(s, 0, c)
    assert abs(sig.H).max() < 1e-10
    np.testing.assert_allclose(sig.g, c + A.T @ s.y[0], atol=1e-10)


# -- compensation ---------------------------------------------------------------------

def test_compensation_zero_when_schedule_unchanged():
    c, x = [np.array([0.1, 0.2])], [np.array([1.0, -1.0])]
    assert compute_compensation(c, x, x)[0] == 0.0


def test_compensation_is_linear_in_tariff():
    c = [np.array([0.1, 0.2])]
    xs, xh = [np.array([1.0, 1.0])], [np.array([0.0, 0.5])]
    a = compute_compensation(c, xs, xh)
    b = compute_compensation([2 * c[0]], xs, xh)
    np.testing.assert_allclose(b, 2 * a)


def test_compensation_flags_non_optimal_baseline():
    with pytest.raises(ValueError, match="baseline not optimal"):
        compute_compensation([np.array([1.0])], [np.array([0.0])], [np.array([1.0])])


# -- full runs on tiny feeders -----------------------------------------------------------

def loose(seed):
    net, agents, _ = tiny_instance(seed)
    net = net.with_limits(GridLimits(v_min=0.5, v_max=1.5, s_s_max=100.0, q_s_max=50.0))
    x_hat = np.concatenate([a.baseline()[0] for a in agents])
    attach = tuple(a.bus for a in agents)
    op = demand_to_operating_point(net, attach, x_hat, agents[0].problem.K)
    return net, agents, assemble_dso_constraints(net, op, attach)


@pytest.mark.parametrize("seed", [0, 4, 7])
def test_loose_limits_converge_immediately_without_compensation(seed):
    net, agents, lin = loose(seed)
    rep = run_coordination(agents, lin, net)
    assert rep.status == CONVERGED and rep.iterations <= 3
    assert all(np.all(y == 0) for y in rep.state.y)
    np.testing.assert_allclose(rep.compensation, 0.0, atol=1e-6)


def test_admm_reaches_centralized_cost():
    net, agents, lin = tiny_instance(2)
    _, central = solve_centralized(agents, lin)
    rep = run_coordination(agents, lin, None, AdmmConfig(max_iter=2000, fixed_tol=1e-6))
    cost = float(sum(a.c @ x for a, x in zip(agents, rep.x)))
    assert abs(cost - central) <= 1e-5 * (1 + abs(central))
    assert lin.violation(np.concatenate(rep.x)) <= 1e-4
    assert np.all(rep.compensation >= -1e-9)


def test_agent_failure_names_agent_and_iteration(monkeypatch):
    net, agents, lin = tiny_instance(0)

    def broken(signal):
        raise ProsumerError("subproblem max_iter")

    monkeypatch.setattr(agents[-1], "respond", broken)
    with pytest.raises(CoordinationError, match=f"agent {agents[-1].name} failed at iteration 1"):
        run_coordination(agents, lin, net)


def test_report_serializes():
    net, agents, lin = tiny_instance(3)
    rep = run_coordination(agents, lin, net, AdmmConfig(max_iter=20))
    d = json.loads(json.dumps(rep.to_dict()))
    assert d["iterations"] == rep.iterations
    assert [p["name"] for p in d["prosumers"]] == rep.names
    assert d["total_compensation"] == pytest.approx(rep.compensation.sum())


def test_state_dimensions_checked():
    _, agents, lin = tiny_instance(0)
    with pytest.raises(ValueError, match="one initial demand per prosumer"):
        init_state(lin, [np.zeros(2)] * (lin.n_prosumers + 1))
    assert isinstance(init_state(lin, [a.baseline()[0] for a in agents]), AdmmState)
