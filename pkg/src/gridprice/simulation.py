"""Day-ahead coordination, intra-day receding horizon and the real-time loop.

The closed loop is a discrete-event simulation on the 30-s grid. At every
MPC boundary the harness measures the battery states, replaces the first
planning interval of the forecasts by persistence values, re-coordinates on
the remaining day and hands the first-step targets to the real-time layer,
which then runs for one MPC cycle. Simulated time stands still while the MPC
computes, so real-time steps never overlap a recomputation; when a cycle
fails the previous cycle's targets for the same interval are reused.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .coordinator import (
    AdmmConfig,
    AdmmState,
    CoordinationError,
    CoordinationReport,
    ProsumerAgent,
    run_coordination,
)
from .grid import (
    LinearizedConstraints,
    NetworkModel,
    OperatingPoint,
    VoltageProfile,
    assemble_dso_constraints,
    build_admittance,
    demand_to_operating_point,
    solve_power_flow,
    voltage_profile,
)
from .prosumer import ProsumerError, build_prosumer_problem, rt_control, tariff_vector
from .scenario import Scenario

log = logging.getLogger(__name__)

# upper-voltage back-off of the intra-day planner, pu
V_MARGIN = 0.004


def persistent_forecast(history, step: int = 1):
    """Persistence predictor: the most recent realized value, for any lead ``step``.

    ``history`` holds past samples along its last axis.
    """
    h = np.asarray(history, dtype=float)
    if h.ndim == 0 or h.shape[-1] == 0:
        raise ValueError("persistence forecast needs at least one past realization")
    if step < 1:
        raise ValueError("forecast lead must be at least one step")
    return h[..., -1]


# -- day-ahead -------------------------------------------------------------

@dataclass
class DayAheadResult:
    """Planned schedules for the whole day (coordinated or private optima)."""

    coordinated: bool
    x: list
    schedules: list
    x_hat: list
    baseline_schedules: list
    c: list
    report: CoordinationReport | None
    lin: LinearizedConstraints | None
    profile: VoltageProfile
    planning_network: NetworkModel

    @property
    def cost_with(self) -> np.ndarray:
        return np.array([float(ci @ xi) for ci, xi in zip(self.c, self.x)])

    @property
    def cost_without(self) -> np.ndarray:
        return np.array([float(ci @ xi) for ci, xi in zip(self.c, self.x_hat)])

    @property
    def curtailment_kwh(self) -> np.ndarray:
        return np.array([float((p.pv_max - s.p_pv).sum() * p.dt)
                         for p, s in zip(self._problems, self.schedules)])

    _problems: list = field(default_factory=list, repr=False)


def planning_network(scenario: Scenario, slack_voltage: float | None = None,
                     v_margin: float = 0.0) -> NetworkModel:
    """Network seen by the planner, with the upper voltage limit lowered by ``v_margin``."""
    v = scenario.slack_forecast if slack_voltage is None else slack_voltage
    net = scenario.network.with_slack_voltage(float(v))
    if v_margin:
        net = net.with_limits(replace(net.limits, v_max=net.limits.v_max - v_margin))
    return net


def build_agents(scenario: Scenario, first_step: int = 0, soc=None,
                 load=None, pv=None) -> list:
    """Agents over the planning steps ``first_step..K-1``.

    ``load`` and ``pv`` default to the aggregated day-ahead forecasts; ``soc``
    to the asset's initial state of charge.
    """
    tl = scenario.timeline
    load = scenario.plan_mean(scenario.load_forecast)[:, first_step:] if load is None else load
    pv = scenario.plan_mean(scenario.pv_forecast)[:, first_step:] if pv is None else pv
    c = tariff_vector(np.asarray(scenario.tariff)[first_step:], tl.dt_h)
    agents = []
    for i, spec in enumerate(scenario.prosumers):
        s0 = None if soc is None else soc[i]
        problem = build_prosumer_problem(spec, load[i], pv[i], tl.dt_h, soc_init=s0)
        agents.append(ProsumerAgent(problem, c))
    return agents


def run_day_ahead(scenario: Scenario, config: AdmmConfig | None = None,
                  coordinate: bool = True) -> DayAheadResult:
    """Full-day coordination on the forecasts (or the private optima when disabled)."""
    config = config or AdmmConfig()
    errs = scenario.validate()
    if errs:
        raise ValueError("invalid scenario: " + "; ".join(errs))
    net = planning_network(scenario)
    agents = build_agents(scenario)
    K = scenario.timeline.K
    baselines = []
    for a in agents:
        try:
            baselines.append(a.baseline())
        except ProsumerError as exc:
            raise CoordinationError(f"agent {a.name} failed computing its baseline: {exc}") from exc
    x_hat = [b[0] for b in baselines]
    report = lin = None
    if coordinate:
        op = demand_to_operating_point(net, scenario.attachments, np.concatenate(x_hat), K)
        lin = assemble_dso_constraints(net, op, scenario.attachments)
        report = run_coordination(agents, lin, net, config)
        x, schedules = report.x, report.schedules
        lin = report.state.lin
    else:
        x, schedules = [xi.copy() for xi in x_hat], [b[1] for b in baselines]
    profile = voltage_profile(net, demand_to_operating_point(net, scenario.attachments,
                                                             np.concatenate(x), K))
    return DayAheadResult(coordinate, x, schedules, x_hat, [b[1] for b in baselines],
                          [a.c for a in agents], report, lin, profile, net,
                          _problems=[a.problem for a in agents])


# -- receding horizon ------------------------------------------------------

@dataclass(frozen=True)
class Targets:
    """Real-time targets for one MPC cycle, one entry per prosumer."""

    p: np.ndarray
    q: np.ndarray
    curtailment: np.ndarray


@dataclass
class CycleRecord:
    t_s: int
    horizon: int
    status: str
    iterations: int
    r_max: float
    s_max: float
    rho: float
    compensation: np.ndarray
    report: CoordinationReport | None = field(default=None, repr=False)


@dataclass
class Plan:
    """Latest accepted MPC output, kept for warm starts and the stale-target rule."""

    first_step: int
    x: list
    schedules: list
    pv_max: np.ndarray
    state: AdmmState | None = None

    def targets(self, step: int) -> Targets:
        k = step - self.first_step
        if not 0 <= k < self.pv_max.shape[1]:
            raise IndexError("no target for this step")
        p = np.array([xi[2 * k] for xi in self.x])
        q = np.array([xi[2 * k + 1] for xi in self.x])
        pv_plan = np.array([s.p_pv[k] for s in self.schedules])
        pv_max = self.pv_max[:, k]
        curt = np.where(pv_max > 1e-9, 1.0 - pv_plan / np.where(pv_max > 1e-9, pv_max, 1.0), 0.0)
        return Targets(p, q, np.clip(curt, 0.0, 1.0))


def shift_warm_state(state: AdmmState, steps: int) -> AdmmState:
    """Drop the first ``steps`` planning steps from a coordinator state."""
    if steps == 0:
        return state
    lin = state.lin
    mt = lin.m // lin.K
    cut = steps * mt
    x = [xi[2 * steps:].copy() for xi in state.x]
    z = [zi[cut:].copy() for zi in state.z]
    y = [yi[cut:].copy() for yi in state.y]
    shifted_lin = replace(lin, row_scale=lin.row_scale[cut:], K=lin.K - steps, _blocks=None, _grams=None)
    return AdmmState(state.k, x, z, y, state.rho, shifted_lin, state.config)


@dataclass
class TraceLog:
    """Append-only record of a closed-loop run.

    RT columns are stacked per step; ``cycles`` holds one record per MPC
    cycle; ``events`` lists failures that triggered fallbacks.
    """

    names: list
    bus_ids: list
    t_s: list = field(default_factory=list)
    v: list = field(default_factory=list)
    soc: list = field(default_factory=list)
    pv: list = field(default_factory=list)
    p_b: list = field(default_factory=list)
    q_b: list = field(default_factory=list)
    p: list = field(default_factory=list)
    q: list = field(default_factory=list)
    load: list = field(default_factory=list)
    p_target: list = field(default_factory=list)
    q_target: list = field(default_factory=list)
    p_s: list = field(default_factory=list)
    q_s: list = field(default_factory=list)
    cycles: list = field(default_factory=list)
    events: list = field(default_factory=list)
    costs: dict = field(default_factory=dict)

    RT_FIELDS = ("v", "soc", "pv", "p_b", "q_b", "p", "q", "load", "p_target", "q_target",
                 "p_s", "q_s")

    def append_step(self, t_s: int, **cols) -> None:
        if self.t_s and t_s <= self.t_s[-1]:
            raise ValueError("trace timestamps must increase strictly")
        self.t_s.append(int(t_s))
        for name in self.RT_FIELDS:
            getattr(self, name).append(np.asarray(cols[name], dtype=float).copy())

    def append_cycle(self, rec: CycleRecord) -> None:
        if self.cycles and rec.t_s <= self.cycles[-1].t_s:
            raise ValueError("cycle timestamps must increase strictly")
        self.cycles.append(rec)

    def array(self, name: str) -> np.ndarray:
        return np.array(getattr(self, name))

    def columns(self) -> dict:
        """Flat name -> column mapping for the per-step records."""
        cols = {"t_s": np.array(self.t_s, dtype=float)}
        v = self.array("v")
        for j, b in enumerate(self.bus_ids):
            cols[f"v_{b}"] = v[:, j]
        for name in ("soc", "pv", "p_b", "q_b", "p", "q", "load", "p_target", "q_target"):
            a = self.array(name)
            for i, n in enumerate(self.names):
                cols[f"{name}_{n}"] = a[:, i]
        cols["p_s"] = self.array("p_s")
        cols["q_s"] = self.array("q_s")
        return cols

    def cycle_columns(self) -> dict:
        cols = {
            "t_s": np.array([c.t_s for c in self.cycles], dtype=float),
            "horizon": np.array([c.horizon for c in self.cycles], dtype=float),
            "converged": np.array([c.status == "converged" for c in self.cycles], dtype=float),
            "iterations": np.array([c.iterations for c in self.cycles], dtype=float),
            "r_max": np.array([c.r_max for c in self.cycles]),
            "s_max": np.array([c.s_max for c in self.cycles]),
            "rho": np.array([c.rho for c in self.cycles]),
        }
        for i, n in enumerate(self.names):
            cols[f"compensation_{n}"] = np.array([c.compensation[i] for c in self.cycles])
        return cols

    def digest(self) -> str:
        h = hashlib.sha256()
        for cols in (self.columns(), self.cycle_columns()):
            for k in sorted(cols):
                h.update(k.encode())
                h.update(np.ascontiguousarray(cols[k], dtype=np.float64).tobytes())
        for e in self.events:
            h.update(repr(e).encode())
        return h.hexdigest()

    def max_voltage(self) -> float:
        return float(self.array("v").max())


def _mpc_cycle(scenario: Scenario, step: int, soc: np.ndarray, history_end: int,
               plan: Plan, config: AdmmConfig, coordinate: bool, trace: TraceLog,
               v_margin: float = 0.0) -> Plan:
    """One shrinking-horizon re-coordination at planning step ``step``.

    Only realized samples with index ``< history_end`` are read.
    """
    tl = scenario.timeline
    load = scenario.plan_mean(scenario.load_forecast)[:, step:].copy()
    pv = scenario.plan_mean(scenario.pv_forecast)[:, step:].copy()
    load[:, 0] = persistent_forecast(scenario.load_realized[:, :history_end])
    pv[:, 0] = persistent_forecast(scenario.pv_realized[:, :history_end])
    v_slack = float(persistent_forecast(scenario.slack_realized[:history_end]))
    net = planning_network(scenario, v_slack, v_margin)
    t_s = step * tl.dt_plan_s
    K = tl.K - step
    try:
        agents = build_agents(scenario, step, soc=soc, load=load, pv=pv)
        if not coordinate:
            base = [a.baseline() for a in agents]
            x = [b[0] for b in base]
            trace.append_cycle(CycleRecord(t_s, K, "uncoordinated", 0, 0.0, 0.0, 0.0,
                                           np.zeros(len(agents))))
            return Plan(step, x, [b[1] for b in base], pv, None)
        warm = None
        if plan.state is not None:
            warm = shift_warm_state(plan.state, step - plan.first_step)
        x0 = warm.x if warm is not None else [a.baseline()[0] for a in agents]
        op = demand_to_operating_point(net, scenario.attachments, np.concatenate(x0), K)
        row_scale = warm.lin.row_scale if warm is not None else None
        lin = assemble_dso_constraints(net, op, scenario.attachments, row_scale=row_scale)
        report = run_coordination(agents, lin, net, config, warm=warm)
    except (CoordinationError, ProsumerError, ValueError) as exc:
        log.warning("MPC cycle at %d s failed: %s; reusing previous targets", t_s, exc)
        trace.events.append((t_s, "mpc_failed", str(exc)))
        trace.append_cycle(CycleRecord(t_s, K, "failed", 0, np.nan, np.nan, np.nan,
                                       np.full(len(scenario.prosumers), np.nan)))
        return replace(plan, state=None)
    trace.append_cycle(CycleRecord(t_s, K, report.status, report.iterations, report.r_max,
                                   report.s_max, report.rho, report.compensation, report))
    return Plan(step, report.x, report.schedules, pv, report.state)


def _rt_cycle(scenario: Scenario, step: int, soc: np.ndarray, targets: Targets,
              last_setpoints: np.ndarray, trace: TraceLog, Y) -> np.ndarray:
    """Real-time steps of one MPC cycle; returns the updated SoC."""
    tl = scenario.timeline
    net = scenario.network
    cols_of = [net.pq_position(b) for b in scenario.attachments]
    n_rt = tl.rt_per_plan
    kappa0 = step * n_rt
    soc = soc.copy()
    for kappa in range(kappa0, kappa0 + n_rt):
        # forecasts for this step from samples strictly before it
        load_fc = persistent_forecast(scenario.load_realized[:, :kappa])
        pv_fc = persistent_forecast(scenario.pv_realized[:, :kappa])
        N = soc.size
        p_b = np.empty(N)
        q_b = np.empty(N)
        for i, spec in enumerate(scenario.prosumers):
            q_load_fc = float(spec.reactive_load(load_fc[i]))
            try:
                p_b[i], q_b[i] = rt_control(spec.bess, soc[i], targets.p[i], targets.q[i],
                                            load_fc[i], q_load_fc, pv_fc[i],
                                            targets.curtailment[i], tl.dt_rt_h)
            except (ProsumerError, ValueError) as exc:
                trace.events.append((kappa * tl.t2_s, "rt_failed", f"{spec.name}: {exc}"))
                p_b[i], q_b[i] = last_setpoints[i]
        last_setpoints[:, 0], last_setpoints[:, 1] = p_b, q_b
        load = scenario.load_realized[:, kappa]
        q_load = np.array([float(s.reactive_load(load[i]))
                           for i, s in enumerate(scenario.prosumers)])
        pv_out = (1.0 - targets.curtailment) * scenario.pv_realized[:, kappa]
        p = load - pv_out - p_b
        q = q_load - q_b
        soc = soc - tl.dt_rt_h / np.array([s.bess.e_max for s in scenario.prosumers]) * p_b
        pp = np.zeros((1, net.n - 1))
        qq = np.zeros((1, net.n - 1))
        for i, j in enumerate(cols_of):
            pp[0, j] += p[i]
            qq[0, j] += q[i]
        op = OperatingPoint(net.bases.kw_to_pu(pp), net.bases.kw_to_pu(qq))
        model = net.with_slack_voltage(float(scenario.slack_realized[kappa]))
        pf = solve_power_flow(model, op, Y=Y)
        if not pf.converged:
            trace.events.append((kappa * tl.t2_s, "power_flow_diverged", ""))
        trace.append_step(kappa * tl.t2_s, v=pf.v, soc=soc, pv=pv_out, p_b=p_b, q_b=q_b,
                          p=p, q=q, load=load, p_target=targets.p, q_target=targets.q,
                          p_s=pf.p_s, q_s=pf.q_s)
    return soc


def run_closed_loop(scenario: Scenario, day_ahead: DayAheadResult | None = None,
                    config: AdmmConfig | None = None, coordinate: bool = True,
                    on_cycle=None, v_margin: float = V_MARGIN, replan: bool = True) -> TraceLog:
    """Intra-day MPC and real-time control over the experiment window.

    Parameters
    ----------
    day_ahead : DayAheadResult, optional
        Computed on demand. Provides the initial SoC and the warm start.
    config : AdmmConfig, optional
        Coordinator settings; ``max_iter`` and ``budget_seconds`` are taken
        from the scenario timeline.
    v_margin : float
        Back-off of the upper voltage limit used by the intra-day planner, pu.
        Absorbs forecast and tracking error between two re-plans.
    replan : bool
        When false the real-time layer tracks the day-ahead schedule and no
        intra-day coordination takes place.
    """
    tl = scenario.timeline
    config = replace(config or AdmmConfig(), max_iter=tl.budget_iters,
                     budget_seconds=tl.budget_seconds)
    if day_ahead is None:
        day_ahead = run_day_ahead(scenario, config, coordinate)
    first = tl.start_s // tl.dt_plan_s
    last = tl.end_s // tl.dt_plan_s
    soc = np.array([s.soc[first] for s in day_ahead.schedules])
    pv_plan = scenario.plan_mean(scenario.pv_forecast)
    state = day_ahead.report.state if day_ahead.report is not None else None
    plan = Plan(0, day_ahead.x, day_ahead.schedules, pv_plan, state)
    trace = TraceLog(scenario.names, [b.id for b in scenario.network.buses])
    Y = build_admittance(scenario.network)
    setpoints = np.zeros((len(scenario.prosumers), 2))
    for step in range(first, last):
        if replan:
            plan = _mpc_cycle(scenario, step, soc, step * tl.rt_per_plan, plan, config,
                              coordinate, trace, v_margin)
        else:
            trace.append_cycle(CycleRecord(step * tl.dt_plan_s, tl.K - step, "day-ahead", 0, 0.0,
                                           0.0, 0.0, np.zeros(len(scenario.prosumers))))
        soc = _rt_cycle(scenario, step, soc, plan.targets(step), setpoints, trace, Y)
        if on_cycle is not None:
            on_cycle(trace.cycles[-1])
    trace.costs = realized_costs(scenario, trace)
    return trace


def run_receding_horizon(scenario: Scenario, day_ahead: DayAheadResult | None = None,
                         config: AdmmConfig | None = None, coordinate: bool = True,
                         v_margin: float = V_MARGIN) -> TraceLog:
    """Alias of :func:`run_closed_loop`; the MPC always drives the real-time layer."""
    return run_closed_loop(scenario, day_ahead, config, coordinate, v_margin=v_margin)


def realized_costs(scenario: Scenario, trace: TraceLog) -> dict:
    """Tariff cost of the realized demand per prosumer over the window, CHF."""
    tl = scenario.timeline
    if not trace.t_s:
        return {n: 0.0 for n in scenario.names}
    steps = np.array(trace.t_s) // tl.dt_plan_s
    price = np.asarray(scenario.tariff)[steps]
    p = trace.array("p")
    return {n: float(price @ p[:, i] * tl.dt_rt_h) for i, n in enumerate(scenario.names)}


def cost_table(names, cost_without, cost_with) -> dict:
    """Per-prosumer costs with the difference column and a totals row."""
    cw = np.asarray(cost_without, dtype=float)
    cc = np.asarray(cost_with, dtype=float)
    diff = cc - cw
    return {
        "prosumer": list(names) + ["total"],
        "without": np.append(cw, cw.sum()),
        "with": np.append(cc, cc.sum()),
        "difference": np.append(diff, diff.sum()),
    }
