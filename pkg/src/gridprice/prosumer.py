"""Prosumer resources, the price-signal response and the real-time tracker.

Demand vectors are interleaved per time step, ``x = [p_1, q_1, p_2, q_2, ...]``,
in kW/kvar and load-positive (negative values are exports). Internally each
step carries four decision variables ``[p_b, q_b, p_pv, soc]`` where ``p_b`` is
the BESS discharge power and ``soc`` the state of charge at the end of the
step. The aggregation ``x = load - pv - bess`` is applied by substitution, so
it holds exactly for every returned schedule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .qp import QuadraticProgram, QpSolution, solve_qp, solve_qp_active_set

#: weight of the minimal-action regularizer that breaks flat-price ties
REGULARIZATION = 1e-6

N_VARS = 4  # p_b, q_b, p_pv, soc per time step

#: horizons up to this length are warm-started with the dense active-set solver
ACTIVE_SET_MAX_K = 16


class ProsumerError(RuntimeError):
    """Raised when a prosumer subproblem cannot be solved to optimality."""

    def __init__(self, message, solution: QpSolution | None = None):
        super().__init__(message)
        self.solution = solution


@dataclass(frozen=True)
class BessSpec:
    s_max: float  # rated apparent power, kVA
    e_max: float  # energy capacity, kWh
    soc_min: float = 0.1
    soc_max: float = 0.9
    soc_init: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.soc_min < self.soc_max <= 1.0:
            raise ValueError("need 0 <= soc_min < soc_max <= 1")
        if self.s_max <= 0 or self.e_max <= 0:
            raise ValueError("BESS ratings must be positive")
        if not self.soc_min <= self.soc_init <= self.soc_max:
            raise ValueError("soc_init outside [soc_min, soc_max]")

    @property
    def p_box(self) -> float:
        """Inner-box limit on each of p_b and q_b."""
        return self.s_max / math.sqrt(2.0)


@dataclass(frozen=True)
class ProsumerSpec:
    name: str
    bus: str
    bess: BessSpec
    pv_rating: float = 5.0  # kWp, informational
    load_rating: float = 2.5  # kW, informational
    power_factor: float | None = None  # constant load power factor; None means q_load = 0

    def reactive_load(self, p_load):
        p_load = np.asarray(p_load, dtype=float)
        if self.power_factor is None:
            return np.zeros_like(p_load)
        return p_load * math.tan(math.acos(self.power_factor))


@dataclass
class PriceSignal:
    """Quadratic tariff ``f + g'x + 1/2 x'Hx`` advertised to one prosumer.

    Only these coefficients cross the coordinator boundary; the constraint
    sensitivities and multipliers they were built from stay private.
    """

    H: sp.spmatrix
    g: np.ndarray
    f: float
    round: int = 0

    def cost(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(self.f + self.g @ x + 0.5 * x @ (self.H @ x))

    def marginal_price(self, x) -> np.ndarray:
        """Gradient of the advertised cost, per kW (or kvar) and step."""
        return self.g + self.H @ np.asarray(x, dtype=float)

    def consumption_tariff(self, x) -> np.ndarray:
        """The demand-dependent price ``g + H x / 2`` that multiplies ``x`` in the cost."""
        return self.g + 0.5 * (self.H @ np.asarray(x, dtype=float))

    @classmethod
    def flat(cls, c) -> "PriceSignal":
        c = np.asarray(c, dtype=float)
        return cls(sp.csr_matrix((c.size, c.size)), c.copy(), 0.0, 0)


@dataclass
class ResourceSchedule:
    p_b: np.ndarray
    q_b: np.ndarray
    p_pv: np.ndarray
    soc: np.ndarray  # soc[0] is the initial value, soc[t+1] after step t

    def resource_demands(self, p_load, q_load) -> dict[str, np.ndarray]:
        """Per-resource demand vectors in the interleaved layout; they sum to x."""
        K = self.p_b.size
        out = {}
        for name, p, q in (("load", p_load, q_load),
                           ("pv", -self.p_pv, np.zeros(K)),
                           ("bess", -self.p_b, -self.q_b)):
            v = np.empty(2 * K)
            v[0::2], v[1::2] = p, q
            out[name] = v
        return out


def interleave(p, q) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    x = np.empty(2 * p.size)
    x[0::2] = p
    x[1::2] = q
    return x


def tariff_vector(c_per_kwh, dt: float) -> np.ndarray:
    """Linear cost over x (CHF per kW per step) from a per-step price in CHF/kWh."""
    c = np.asarray(c_per_kwh, dtype=float)
    return interleave(c * dt, np.zeros_like(c))


@dataclass
class ProsumerProblem:
    """Constraint skeleton of one prosumer over a horizon of K steps."""

    spec: ProsumerSpec
    p_load: np.ndarray
    q_load: np.ndarray
    pv_max: np.ndarray
    dt: float
    soc_init: float
    N: sp.csr_matrix = field(init=False, repr=False)  # x = x_load + N u
    x_load: np.ndarray = field(init=False, repr=False)
    A_eq: sp.csr_matrix = field(init=False, repr=False)
    b_eq: np.ndarray = field(init=False, repr=False)
    lb: np.ndarray = field(init=False, repr=False)
    ub: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        K = self.K
        b = self.spec.bess
        self.x_load = interleave(self.p_load, self.q_load)
        rows = np.concatenate([2 * np.arange(K), 2 * np.arange(K), 2 * np.arange(K) + 1])
        cols = np.concatenate([N_VARS * np.arange(K), N_VARS * np.arange(K) + 2,
                               N_VARS * np.arange(K) + 1])
        self.N = sp.csr_matrix((-np.ones(3 * K), (rows, cols)), shape=(2 * K, N_VARS * K))
        self._NT = self.N.T.tocsr()
        reg = np.zeros((K, N_VARS))
        reg[:, :3] = 2 * REGULARIZATION
        self._reg = sp.diags(reg.ravel(), format="csr")

        # soc_t - soc_{t-1} + (dt/E) p_b,t = 0 with soc_{-1} = soc_init
        alpha = self.dt / b.e_max
        t = np.arange(K)
        r = np.concatenate([t, t, t[1:]])
        c = np.concatenate([N_VARS * t + 3, N_VARS * t, N_VARS * t[1:] - 1])
        v = np.concatenate([np.ones(K), np.full(K, alpha), -np.ones(K - 1)])
        self.A_eq = sp.csr_matrix((v, (r, c)), shape=(K, N_VARS * K))
        self.b_eq = np.zeros(K)
        self.b_eq[0] = self.soc_init

        lb = np.empty((K, N_VARS))
        ub = np.empty((K, N_VARS))
        lb[:, 0] = lb[:, 1] = -b.p_box
        ub[:, 0] = ub[:, 1] = b.p_box
        lb[:, 2], ub[:, 2] = 0.0, self.pv_max
        lb[:, 3], ub[:, 3] = b.soc_min, b.soc_max
        self.lb, self.ub = lb.ravel(), ub.ravel()

    @property
    def K(self) -> int:
        return self.p_load.size

    def demand(self, u) -> np.ndarray:
        return self.x_load + self.N @ u

    def regularization(self, u) -> float:
        u = np.asarray(u).reshape(-1, N_VARS)
        return REGULARIZATION * float(
            u[:, 0] @ u[:, 0] + u[:, 1] @ u[:, 1] + np.sum((self.pv_max - u[:, 2]) ** 2))

    def qp(self, signal: PriceSignal) -> QuadraticProgram:
        """The price-signal minimization, with the tie-breaking regularizer."""
        if signal.g.size != 2 * self.K:
            raise ValueError(f"signal has length {signal.g.size}, expected {2 * self.K}")
        if self.K <= ACTIVE_SET_MAX_K:
            # small horizons: dense algebra avoids the sparse bookkeeping
            H = signal.H.toarray() if sp.issparse(signal.H) else np.asarray(signal.H)
            Nd = self._dense()
            P = Nd.T @ H @ Nd
            P = (P + P.T) * 0.5 + np.diag(self._reg.diagonal())
            q = Nd.T @ (signal.g + H @ self.x_load)
            A_eq = self._dense_eq
        else:
            H = sp.csr_matrix(signal.H)
            P = self._NT @ H @ self.N
            P = ((P + P.T) * 0.5 + self._reg).tocsr()
            q = self._NT @ (signal.g + H @ self.x_load)
            A_eq = self.A_eq
        q[2::N_VARS] -= 2 * REGULARIZATION * self.pv_max
        return QuadraticProgram(P, q, A_eq, self.b_eq, lb=self.lb, ub=self.ub)

    def _dense(self) -> np.ndarray:
        if getattr(self, "_Nd", None) is None:
            self._Nd = self.N.toarray()
            self._dense_eq = self.A_eq.toarray()
        return self._Nd

    def schedule(self, u) -> tuple[np.ndarray, ResourceSchedule]:
        U = np.asarray(u).reshape(-1, N_VARS)
        p_b, q_b, p_pv = U[:, 0].copy(), U[:, 1].copy(), U[:, 2].copy()
        soc = soc_trajectory(self.soc_init, p_b, self.dt, self.spec.bess.e_max)
        x = interleave(self.p_load - p_pv - p_b, self.q_load - q_b)
        return x, ResourceSchedule(p_b, q_b, p_pv, soc)

    def check_schedule(self, sched: ResourceSchedule, tol: float = 1e-7) -> list[str]:
        """List of violated resource constraints (empty when the schedule is valid)."""
        b = self.spec.bess
        bad = []
        if np.abs(sched.p_b).max(initial=0) > b.p_box + tol:
            bad.append("p_b box")
        if np.abs(sched.q_b).max(initial=0) > b.p_box + tol:
            bad.append("q_b box")
        if (sched.p_pv < -tol).any() or (sched.p_pv > self.pv_max + tol).any():
            bad.append("pv curtailment bounds")
        if (sched.soc < b.soc_min - tol).any() or (sched.soc > b.soc_max + tol).any():
            bad.append("soc bounds")
        ref = soc_trajectory(self.soc_init, sched.p_b, self.dt, b.e_max)
        if np.abs(ref - sched.soc).max() > 1e-12:
            bad.append("soc recursion")
        return bad


def soc_trajectory(soc_init: float, p_b, dt: float, e_max: float) -> np.ndarray:
    """SoC before the first and after every step under unit efficiency."""
    p_b = np.asarray(p_b, dtype=float)
    return np.concatenate([[soc_init], soc_init - (dt / e_max) * np.cumsum(p_b)])


def build_prosumer_problem(spec: ProsumerSpec, p_load, pv_max, dt: float,
                           q_load=None, soc_init: float | None = None) -> ProsumerProblem:
    """Assemble the prosumer constraint skeleton for a K-step horizon.

    Parameters
    ----------
    spec : ProsumerSpec
    p_load, pv_max : array_like
        Inflexible active load and PV potential per step, kW.
    dt : float
        Step length in hours.
    q_load : array_like, optional
        Reactive load; derived from ``spec.power_factor`` when omitted.
    soc_init : float, optional
        Measured SoC at the start of the horizon (defaults to the asset's initial SoC).
    """
    p_load = np.asarray(p_load, dtype=float).ravel()
    pv_max = np.asarray(pv_max, dtype=float).ravel()
    q_load = spec.reactive_load(p_load) if q_load is None else np.asarray(q_load, dtype=float).ravel()
    if not (p_load.size == pv_max.size == q_load.size):
        raise ValueError("load, reactive load and PV series must have the same length")
    if p_load.size == 0:
        raise ValueError("empty horizon")
    if (pv_max < 0).any():
        raise ValueError("PV potential must be non-negative")
    if dt <= 0:
        raise ValueError("dt must be positive")
    soc0 = spec.bess.soc_init if soc_init is None else float(soc_init)
    b = spec.bess
    if not b.soc_min - 1e-9 <= soc0 <= b.soc_max + 1e-9:
        raise ValueError(f"initial SoC {soc0} outside bounds")
    soc0 = min(max(soc0, b.soc_min), b.soc_max)
    return ProsumerProblem(spec, p_load, q_load, pv_max, float(dt), soc0)


@dataclass
class WarmStart:
    """Previous x-update solution and active set, reused by the next solve."""

    u: np.ndarray | None = None
    active: list | None = None


def _active_rows(problem: "ProsumerProblem", u) -> list:
    # bound rows in the stacking order of the active-set solver: upper then lower
    lb, ub = problem.lb, problem.ub
    free = lb < ub
    iu = np.flatnonzero(np.isfinite(ub) & free)
    il = np.flatnonzero(np.isfinite(lb) & free)
    tol = 1e-9 * (1.0 + np.abs(ub[iu]).max(initial=0.0))
    upper = np.flatnonzero(np.abs(ub[iu] - u[iu]) <= tol)
    lower = np.flatnonzero(np.abs(u[il] - lb[il]) <= tol)
    return list(upper) + list(iu.size + lower)


def x_update(problem: ProsumerProblem, signal: PriceSignal, tol: float = 1e-8,
             warm: WarmStart | None = None):
    """Minimize the advertised cost subject to the prosumer's constraints.

    ``warm`` carries the previous solution between calls over the same
    constraints; it is updated in place.

    Returns
    -------
    x : ndarray
        Demand schedule (2K,).
    schedule : ResourceSchedule
    objective : float
        Advertised cost at ``x`` (regularizer excluded).
    """
    qp = problem.qp(signal)
    sol = None
    if warm is not None and warm.u is not None and problem.K <= ACTIVE_SET_MAX_K:
        sol = solve_qp_active_set(qp, warm.u, warm.active, tol=tol)
    if sol is None:
        sol = solve_qp(qp, tol=tol, check_convexity=False)
    if warm is not None and sol.optimal and problem.K <= ACTIVE_SET_MAX_K:
        warm.u = sol.u
        warm.active = sol.active if sol.active is not None else _active_rows(problem, sol.u)
    if not sol.optimal:
        raise ProsumerError(f"prosumer {problem.spec.name}: subproblem {sol.status}", sol)
    x, sched = problem.schedule(sol.u)
    return x, sched, signal.cost(x)


def local_cost_min(problem: ProsumerProblem, c, tol: float = 1e-8):
    """Private optimum under the base tariff ``c`` (per-x linear cost, CHF per kW-step)."""
    x, sched, cost = x_update(problem, PriceSignal.flat(c), tol=tol)
    return x, sched, cost


def rt_control(bess: BessSpec, soc: float, p_target: float, q_target: float,
               p_load_fc: float, q_load_fc: float, pv_fc: float, curtailment: float,
               dt_rt: float) -> tuple[float, float]:
    """BESS setpoint that tracks the aggregated demand target for one RT step.

    The PV output is fixed to ``(1 - curtailment) * pv_fc``; the battery
    absorbs the remaining deviation within its power box and the one-step
    SoC window.
    """
    if not bess.soc_min - 1e-9 <= soc <= bess.soc_max + 1e-9:
        raise ValueError("state out of bounds")
    pv = (1.0 - curtailment) * pv_fc
    # p = p_l - pv - p_b ; q = q_l - q_b
    p_free = p_load_fc - pv
    alpha = dt_rt / bess.e_max
    lo = max(-bess.p_box, (soc - bess.soc_max) / alpha)
    hi = min(bess.p_box, (soc - bess.soc_min) / alpha)
    lo, hi = min(lo, 0.0), max(hi, 0.0)  # rounding at a full/empty battery
    P = 2.0 * np.eye(2)
    q = np.array([2.0 * (p_target - p_free), 2.0 * (q_target - q_load_fc)])
    qp = QuadraticProgram(P, q, lb=[lo, -bess.p_box], ub=[hi, bess.p_box])
    sol = solve_qp(qp, check_convexity=False)
    if not sol.optimal:
        raise ProsumerError("real-time tracking problem not solved", sol)
    p_b, q_b = np.clip(sol.u, [lo, -bess.p_box], [hi, bess.p_box])
    return float(p_b), float(q_b)
