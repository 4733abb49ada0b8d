"""Small instances shared by several test modules."""

from dataclasses import replace

import numpy as np

from gridprice.coordinator import ProsumerAgent
from gridprice.grid import (
    SLACK,
    Bus,
    GridLimits,
    Line,
    NetworkModel,
    OperatingPoint,
    assemble_dso_constraints,
    demand_to_operating_point,
    solve_power_flow,
)
from gridprice.prosumer import BessSpec, ProsumerSpec, build_prosumer_problem, tariff_vector
from gridprice.scenario import ProfileParams, TimelineConfig, synthetic_scenario

# hourly planning with 10-minute real-time steps keeps closed loops small
TL = TimelineConfig(dt_plan_s=3600, t1_s=3600, t2_s=600, budget_iters=60,
                    start_s=10 * 3600, end_s=13 * 3600)


def tiny_instance(seed: int):
    """Feeder with at most 3 buses, at most 2 prosumers and K <= 4 steps.

    PV is sized so that the uncoordinated optimum pushes at least one bus
    above ``v_max``.
    """
    rng = np.random.default_rng(seed)
    n_bus = int(rng.integers(2, 4))
    K = int(rng.integers(2, 5))
    n_pros = int(rng.integers(1, 3))
    buses = [Bus("S", SLACK)] + [Bus(f"B{k}") for k in range(1, n_bus)]
    lines = [Line(buses[k].id, buses[k + 1].id, rng.uniform(0.3, 0.8), rng.uniform(0.05, 0.3))
             for k in range(n_bus - 1)]
    limits = GridLimits(v_min=0.9, v_max=float(rng.uniform(1.01, 1.02)), s_s_max=3.0, q_s_max=0.3)
    net = NetworkModel(buses, lines, limits=limits)
    attach = tuple(str(rng.choice([b.id for b in buses[1:]])) for _ in range(n_pros))
    dt = 0.5
    tariff = rng.uniform(0.05, 0.4, K)
    c = tariff_vector(tariff, dt)
    agents = []
    for i, bus in enumerate(attach):
        spec = ProsumerSpec(f"P{i}", bus, BessSpec(2.5, 2.5, 0.1, 0.9, float(rng.uniform(0.2, 0.8))))
        load = rng.uniform(0.0, 1.0, K)
        pv = rng.uniform(3.0, 6.0, K)
        agents.append(ProsumerAgent(build_prosumer_problem(spec, load, pv, dt), c))
    x_hat = np.concatenate([a.baseline()[0] for a in agents])
    op = demand_to_operating_point(net, attach, x_hat, K)
    lin = assemble_dso_constraints(net, op, attach)
    return net, agents, lin


def small_scenario(seed=3, v_max=1.05, **profile):
    """Three-bus feeder with two prosumers on the hourly timeline ``TL``."""
    buses = [Bus("S", SLACK), Bus("A"), Bus("B")]
    lines = [Line("S", "A", 0.3, 0.1), Line("A", "B", 0.4, 0.1)]
    net = NetworkModel(buses, lines, limits=GridLimits(v_max=v_max))
    bess = BessSpec(2.5, 2.5, 0.1, 0.9, 0.5)
    pros = [ProsumerSpec("PA", "A", bess), ProsumerSpec("PB", "B", bess)]
    params = replace(ProfileParams(), **profile)
    return synthetic_scenario(net, pros, seed, params, TL, name="small")


def fd_sensitivities(model, op, h=1e-5):
    """Central differences of the AC oracle voltages w.r.t. injections at step 0."""
    m = model.n - 1
    Kp, Kq = np.zeros((m, m)), np.zeros((m, m))
    for j in range(m):
        for K, field in ((Kp, "p"), (Kq, "q")):
            hi, lo = op.p.copy(), op.p.copy()
            qh, ql = op.q.copy(), op.q.copy()
            if field == "p":
                hi[0, j] += h
                lo[0, j] -= h
            else:
                qh[0, j] += h
                ql[0, j] -= h
            vp = solve_power_flow(model, OperatingPoint(hi, qh)).v[model.pq]
            vm = solve_power_flow(model, OperatingPoint(lo, ql)).v[model.pq]
            K[:, j] = (vp - vm) / (2 * h)
    return Kp, Kq
