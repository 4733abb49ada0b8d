"""ADMM coordination between the grid operator and the prosumers.

The coordinator owns the linearized grid constraints, the copied vectors
``z_i`` and the multipliers ``y_i``. Prosumers only ever see the quadratic
price signal built from them.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .grid import LinearizedConstraints, NetworkModel, evaluate_constraints, relinearize
from .prosumer import (
    PriceSignal,
    ProsumerError,
    ProsumerProblem,
    ResourceSchedule,
    WarmStart,
    local_cost_min,
    x_update,
)
from .qp import QuadraticProgram, solve_qp

log = logging.getLogger(__name__)

CONVERGED = "converged"
TIMEOUT = "timeout"


class CoordinationError(RuntimeError):
    pass


@dataclass(frozen=True)
class AdmmConfig:
    rho0: float = 1.0
    eps_abs: float = 1e-5
    eps_rel: float = 1e-4
    mu: float = 10.0
    tau_incr: float = 1.01
    tau_decr: float = 1.01
    adaptive: bool = True
    max_iter: int = 150
    budget_seconds: float | None = None
    tol_lin: float = 1e-3
    relin_every: int = 5
    relinearize: bool = True
    # when set, replaces the dynamic tolerances by this absolute bound on r and s
    fixed_tol: float | None = None
    min_iter: int = 1


@dataclass(frozen=True)
class IterationRecord:
    k: int
    rho: float
    r_max: float
    s_max: float
    eps_pri: float
    eps_dual: float
    r_lin: float
    relinearized: bool


@dataclass
class AdmmState:
    k: int
    x: list
    z: list
    y: list
    rho: float
    lin: LinearizedConstraints
    config: AdmmConfig = field(default_factory=AdmmConfig)
    history: list = field(default_factory=list)
    relinearizations: int = 0

    @property
    def n(self) -> int:
        return len(self.x)


def init_state(lin: LinearizedConstraints, x0: Sequence[np.ndarray], rho0: float = 1.0,
               config: AdmmConfig | None = None) -> AdmmState:
    """Initial state: ``y = 0`` and ``z_i = A_i x_i0``."""
    config = config or AdmmConfig(rho0=rho0)
    x = [np.asarray(xi, dtype=float).copy() for xi in x0]
    if len(x) != lin.n_prosumers:
        raise ValueError("one initial demand per prosumer expected")
    z = [lin.block(i) @ xi for i, xi in enumerate(x)]
    y = [np.zeros(lin.m) for _ in x]
    return AdmmState(0, x, z, y, float(rho0), lin, config)


def _coupling(state: AdmmState, x: Sequence[np.ndarray]) -> tuple[list, np.ndarray]:
    """Per-prosumer ``v_i = A_i x_i + y_i / rho`` and their sum."""
    v = [state.lin.block(i) @ xi + yi / state.rho for i, (xi, yi) in enumerate(zip(x, state.y))]
    total = np.zeros(state.lin.m)
    for vi in v:
        total = total + vi
    return v, total


def z_update(state: AdmmState, x: Sequence[np.ndarray]) -> list:
    """Copy update via the averaged closed form of the sharing problem.

    The shared multiplier is ``lam = max(0, rho (sum_i v_i - b) / N)`` per row
    and ``z_i = v_i - lam / rho``.
    """
    v, total = _coupling(state, x)
    lam = shared_multiplier(state, total)
    if not np.all(np.isfinite(lam)):
        raise CoordinationError("grid constraints infeasible")
    return [vi - lam / state.rho for vi in v]


def shared_multiplier(state: AdmmState, total: np.ndarray) -> np.ndarray:
    lin = state.lin
    excess = total - lin.b
    return np.maximum(excess, 0.0) * (state.rho / state.n)


def z_update_qp(state: AdmmState, x: Sequence[np.ndarray], tol: float = 1e-10) -> list:
    """Copy update as one QP over all ``N m`` copied variables (reference route)."""
    lin, rho, N, m = state.lin, state.rho, state.n, state.lin.m
    v, _ = _coupling(state, x)
    # min sum_i rho/2 ||z_i - v_i||^2  s.t.  sum_i z_i <= b
    P = sp.identity(N * m, format="csr") * rho
    q = -rho * np.concatenate(v)
    A_in = sp.hstack([sp.identity(m)] * N, format="csr")
    sol = solve_qp(QuadraticProgram(P, q, A_in=A_in, b_in=lin.b), tol=tol)
    if not sol.optimal:
        raise CoordinationError("grid constraints infeasible")
    return [sol.u[i * m:(i + 1) * m] for i in range(N)]


def dual_update(state: AdmmState, x: Sequence[np.ndarray], z: Sequence[np.ndarray]) -> list:
    """Dual ascent: ``y_i <- y_i + rho (A_i x_i - z_i)``."""
    return [yi + state.rho * (state.lin.block(i) @ xi - zi)
            for i, (xi, yi, zi) in enumerate(zip(x, state.y, z))]


@dataclass(frozen=True)
class Residuals:
    r: np.ndarray
    s: np.ndarray
    eps_pri: np.ndarray
    eps_dual: np.ndarray

    @property
    def r_max(self) -> float:
        return float(self.r.max())

    @property
    def s_max(self) -> float:
        return float(self.s.max())

    def satisfied(self, fixed_tol: float | None = None) -> bool:
        if fixed_tol is not None:
            return self.r_max <= fixed_tol and self.s_max <= fixed_tol
        return bool(np.all(self.r <= self.eps_pri) and np.all(self.s <= self.eps_dual))


def residuals(state: AdmmState, x: Sequence[np.ndarray], z_new: Sequence[np.ndarray],
              z_old: Sequence[np.ndarray], y: Sequence[np.ndarray]) -> Residuals:
    """Primal ``||A_i x_i - z_i||`` and dual ``rho ||z_i^{k+1} - z_i^k||`` residuals."""
    cfg, lin = state.config, state.lin
    m = lin.m
    r, s, ep, ed = [], [], [], []
    for i, (xi, zi, zo, yi) in enumerate(zip(x, z_new, z_old, y)):
        Ai = lin.block(i)
        ax = Ai @ xi
        r.append(np.linalg.norm(ax - zi))
        s.append(state.rho * np.linalg.norm(zi - zo))
        ep.append(math.sqrt(m) * cfg.eps_abs + cfg.eps_rel * max(np.linalg.norm(ax), np.linalg.norm(zi)))
        ed.append(math.sqrt(xi.size) * cfg.eps_abs + cfg.eps_rel * np.linalg.norm(Ai.T @ yi))
    return Residuals(np.array(r), np.array(s), np.array(ep), np.array(ed))


def adapt_rho(rho: float, r_max: float, s_max: float, config: AdmmConfig) -> float:
    """Residual-balancing update; multipliers are left unscaled."""
    if not config.adaptive:
        return rho
    if r_max > config.mu * s_max:
        return rho * config.tau_incr
    if s_max > config.mu * r_max:
        return rho / config.tau_decr
    return rho


def extract_price_signal(state: AdmmState, i: int, c: np.ndarray) -> PriceSignal:
    """Quadratic tariff equal to the prosumer's augmented Lagrangian term."""
    At, AtA = state.lin.gram(i)
    yi, zi, rho = state.y[i], state.z[i], state.rho
    g = np.asarray(c, dtype=float) + At @ (yi - rho * zi)
    f = 0.5 * rho * float(zi @ zi) - float(yi @ zi)
    return PriceSignal(AtA * rho, g, f, state.k)


def compute_compensation(c: Sequence[np.ndarray], x_star: Sequence[np.ndarray],
                         x_hat: Sequence[np.ndarray], tol: float = 1e-6) -> np.ndarray:
    """Tariff-cost increase ``c'(x* - x_hat)`` per prosumer, CHF."""
    comp = np.array([float(np.asarray(ci) @ (np.asarray(a) - np.asarray(b)))
                     for ci, a, b in zip(c, x_star, x_hat)])
    if np.any(comp < -tol):
        raise ValueError("baseline not optimal")
    return comp


class ProsumerAgent:
    """A prosumer answering price signals with its optimal demand.

    The agent holds its own constraints and base tariff and only receives
    :class:`PriceSignal` objects from the coordinator.
    """

    def __init__(self, problem: ProsumerProblem, c: np.ndarray):
        self.problem = problem
        self.c = np.asarray(c, dtype=float)
        if self.c.size != 2 * problem.K:
            raise ValueError("tariff length does not match the horizon")
        self.schedule: ResourceSchedule | None = None
        self._baseline = None
        self._warm = WarmStart()

    @property
    def name(self) -> str:
        return self.problem.spec.name

    @property
    def bus(self) -> str:
        return self.problem.spec.bus

    def respond(self, signal: PriceSignal) -> np.ndarray:
        x, sched, _ = x_update(self.problem, signal, warm=self._warm)
        self.schedule = sched
        return x

    def baseline(self):
        """Private optimum under the base tariff (cached)."""
        if self._baseline is None:
            self._baseline = local_cost_min(self.problem, self.c)
        return self._baseline


@dataclass
class CoordinationReport:
    status: str
    iterations: int
    r_max: float
    s_max: float
    rho: float
    signals: list
    compensation: np.ndarray
    cost_with: np.ndarray
    cost_without: np.ndarray
    relinearizations: int
    names: list
    x: list
    x_hat: list
    schedules: list
    trace: list
    state: AdmmState = field(repr=False, default=None)

    @property
    def total_compensation(self) -> float:
        return float(self.compensation.sum())

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "iterations": self.iterations,
            "r_max": self.r_max,
            "s_max": self.s_max,
            "rho": self.rho,
            "relinearizations": self.relinearizations,
            "prosumers": [
                {
                    "name": n,
                    "cost_without": float(cw),
                    "cost_with": float(cc),
                    "compensation": float(cp),
                    "signal": {"round": s.round, "f": s.f, "g": s.g.tolist(),
                               "H": _coo(s.H)},
                }
                for n, cw, cc, cp, s in zip(self.names, self.cost_without, self.cost_with,
                                            self.compensation, self.signals)
            ],
            "total_compensation": self.total_compensation,
        }


def _coo(M) -> dict:
    M = sp.coo_matrix(M)
    return {"shape": list(M.shape), "row": M.row.tolist(), "col": M.col.tolist(),
            "val": M.data.tolist()}


def maybe_relinearize(state: AdmmState, model: NetworkModel, x: Sequence[np.ndarray]):
    """Re-linearize when the AC linearization error exceeds ``tol_lin``.

    Returns ``(lin, r_lin, changed)``. If the oracle cannot evaluate the
    constraints the current linearization is kept and a warning is logged.
    """
    lin = state.lin
    xs = np.concatenate(x)
    try:
        g = evaluate_constraints(model, lin, xs)
    except ValueError:
        log.warning("iteration %d: AC oracle diverged, keeping linearization", state.k)
        return lin, math.nan, False
    r_lin = float(np.max(np.abs(g - lin.slack(xs)), initial=0.0))
    if r_lin <= state.config.tol_lin:
        return lin, r_lin, False
    try:
        new = relinearize(model, lin, xs)
    except ValueError:
        log.warning("iteration %d: linearization point infeasible, keeping linearization", state.k)
        return lin, r_lin, False
    return new, r_lin, True


def run_coordination(agents: Sequence[ProsumerAgent], lin: LinearizedConstraints,
                     model: NetworkModel | None = None, config: AdmmConfig | None = None, *,
                     x0: Sequence[np.ndarray] | None = None, warm: AdmmState | None = None,
                     on_iteration: Callable[[IterationRecord], None] | None = None
                     ) -> CoordinationReport:
    """Alternate prosumer responses, copy and dual updates.

    Stops when both residuals meet their tolerances or the budget runs out.

    Parameters
    ----------
    agents : sequence of ProsumerAgent
        In the column order of ``lin``.
    lin : LinearizedConstraints
        Initial linearization.
    model : NetworkModel, optional
        AC oracle for the re-linearization step; skipped when omitted.
    x0 : list of arrays, optional
        Initial demands. Defaults to the agents' private optima.
    warm : AdmmState, optional
        Previous state whose ``y``, ``z`` and ``rho`` seed this run. Its
        vectors must already match the dimensions of ``lin``.
    """
    config = config or AdmmConfig()
    names = [a.name for a in agents]
    baselines = []
    for a in agents:
        try:
            baselines.append(a.baseline())
        except ProsumerError as exc:
            raise CoordinationError(f"agent {a.name} failed computing its baseline: {exc}") from exc
    x_hat = [b[0] for b in baselines]
    x = [xi.copy() for xi in (x0 if x0 is not None else x_hat)]
    state = init_state(lin, x, config.rho0, config)
    if warm is not None:
        state.z = [zi.copy() for zi in warm.z]
        state.y = [yi.copy() for yi in warm.y]
        state.rho = warm.rho
    c = [a.c for a in agents]

    start = time.monotonic()
    status = TIMEOUT
    res = None
    last_check = 0
    schedules = [b[1] for b in baselines]
    while state.k < config.max_iter:
        if config.budget_seconds is not None and time.monotonic() - start > config.budget_seconds:
            break
        signals = [extract_price_signal(state, i, c[i]) for i in range(state.n)]
        x_new = []
        for i, (agent, sig) in enumerate(zip(agents, signals)):
            try:
                x_new.append(agent.respond(sig))
            except ProsumerError as exc:
                raise CoordinationError(
                    f"agent {agent.name} failed at iteration {state.k + 1}: {exc}") from exc
            schedules[i] = agent.schedule
        z_new = z_update(state, x_new)
        y_new = dual_update(state, x_new, z_new)
        res = residuals(state, x_new, z_new, state.z, y_new)
        state.x, state.z, state.y = x_new, z_new, y_new
        state.k += 1

        done = res.satisfied(config.fixed_tol) and state.k >= config.min_iter
        r_lin, changed = math.nan, False
        if model is not None and config.relinearize and (
                done or state.k - last_check >= config.relin_every):
            last_check = state.k
            new_lin, r_lin, changed = maybe_relinearize(state, model, x_new)
            if changed:
                state.lin = new_lin
                state.relinearizations += 1
                done = False
        rec = IterationRecord(state.k, state.rho, res.r_max, res.s_max, float(res.eps_pri.min()),
                              float(res.eps_dual.min()), r_lin, changed)
        state.history.append(rec)
        if on_iteration is not None:
            on_iteration(rec)
        if done:
            status = CONVERGED
            break
        state.rho = adapt_rho(state.rho, res.r_max, res.s_max, config)

    final_signals = [extract_price_signal(state, i, c[i]) for i in range(state.n)]
    cost_with = np.array([float(ci @ xi) for ci, xi in zip(c, state.x)])
    cost_without = np.array([float(ci @ xi) for ci, xi in zip(c, x_hat)])
    comp = compute_compensation(c, state.x, x_hat)
    return CoordinationReport(
        status=status, iterations=state.k,
        r_max=res.r_max if res else 0.0, s_max=res.s_max if res else 0.0,
        rho=state.rho, signals=final_signals, compensation=comp,
        cost_with=cost_with, cost_without=cost_without,
        relinearizations=state.relinearizations, names=names,
        x=[xi.copy() for xi in state.x], x_hat=x_hat, schedules=schedules,
        trace=list(state.history), state=state,
    )


def solve_centralized(agents: Sequence[ProsumerAgent], lin: LinearizedConstraints,
                      tol: float = 1e-7) -> tuple[list, float]:
    """Monolithic reference: all prosumer problems plus the shared rows in one QP.

    Minimizes the summed base-tariff cost (with each agent's tie-breaking
    regularizer) subject to ``sum_i A_i x_i <= b``. Returns the demands and
    the summed tariff cost.
    """
    qps = [a.problem.qp(PriceSignal.flat(a.c)) for a in agents]
    P = sp.block_diag([q.P for q in qps], format="csr")
    qv = np.concatenate([q.q for q in qps])
    A_eq = sp.block_diag([q.A_eq for q in qps], format="csr")
    b_eq = np.concatenate([q.b_eq for q in qps])
    # A_i x_i = A_i (x_load + N u)
    A_in = sp.hstack([lin.block(i) @ a.problem.N for i, a in enumerate(agents)], format="csr")
    b_in = lin.b - sum(lin.block(i) @ a.problem.x_load for i, a in enumerate(agents))
    qp = QuadraticProgram(P, qv, A_eq, b_eq, A_in, b_in,
                          np.concatenate([q.lb for q in qps]), np.concatenate([q.ub for q in qps]))
    sol = solve_qp(qp, tol=tol, check_convexity=False)
    if not sol.optimal:
        raise CoordinationError(f"centralized problem {sol.status}")
    x, start = [], 0
    for a, q in zip(agents, qps):
        u = sol.u[start:start + q.n]
        start += q.n
        x.append(a.problem.demand(u))
    return x, float(sum(a.c @ xi for a, xi in zip(agents, x)))


def respond_at_rho(agents: Sequence[ProsumerAgent], state: AdmmState, rho: float) -> list:
    """Demands that minimize signals rebuilt from the frozen ``(y, z)`` with penalty ``rho``."""
    probe = AdmmState(state.k, state.x, state.z, state.y, float(rho), state.lin, state.config)
    return [a.respond(extract_price_signal(probe, i, a.c)) for i, a in enumerate(agents)]
