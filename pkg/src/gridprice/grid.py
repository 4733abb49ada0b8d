"""Network model, AC power flow, voltage sensitivities and linearized grid limits.

Power quantities handed to this module follow the demand convention: a
positive ``p`` at a bus means the bus consumes active power. Internally the
power flow works with injections, so the sign flips exactly once, inside
:func:`solve_power_flow`.

The linearized constraints operate on the stacked prosumer demand vector
``x = [x_1; ...; x_N]`` where each ``x_i`` interleaves ``(p, q)`` per timestep
in kW/kvar. Constraint rows are expressed in per unit.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

SLACK = "slack"
PQ = "pq"

# row kinds of the linearized constraint system
V_MAX = "v_max"
V_MIN = "v_min"
QS_MAX = "qs_max"
QS_MIN = "qs_min"
PS_MAX = "ps_max"
PS_MIN = "ps_min"


@dataclass(frozen=True)
class Bus:
    id: str
    kind: str = PQ

    def __post_init__(self):
        if self.kind not in (SLACK, PQ):
            raise ValueError(f"bus {self.id}: unknown bus type {self.kind!r}")


@dataclass(frozen=True)
class Line:
    """Pi-model line in SI units; ``b`` is the total shunt susceptance."""

    from_bus: str
    to_bus: str
    r: float
    x: float
    b: float = 0.0


@dataclass(frozen=True)
class Bases:
    """Per-unit bases. ``voltage`` in V (line-to-line), ``power`` in VA."""

    voltage: float = 400.0
    power: float = 10e3

    def __post_init__(self):
        if not (self.voltage > 0 and self.power > 0):
            raise ValueError("bases must be positive")

    @property
    def impedance(self) -> float:
        return self.voltage ** 2 / self.power

    @property
    def power_kw(self) -> float:
        return self.power / 1e3

    def ohm_to_pu(self, z):
        return np.asarray(z) / self.impedance

    def pu_to_ohm(self, z):
        return np.asarray(z) * self.impedance

    def siemens_to_pu(self, y):
        return np.asarray(y) * self.impedance

    def pu_to_siemens(self, y):
        return np.asarray(y) / self.impedance

    def kw_to_pu(self, p):
        return np.asarray(p) / self.power_kw

    def pu_to_kw(self, p):
        return np.asarray(p) * self.power_kw


@dataclass(frozen=True)
class GridLimits:
    """Operating limits in per unit.

    The slack active-power bound is derived from the apparent and reactive
    bounds, ``sqrt(s_s_max**2 - q_s_max**2)``.
    """

    v_min: float = 0.9
    v_max: float = 1.05
    s_s_max: float = 3.0
    q_s_max: float = 0.3

    def __post_init__(self):
        if not self.v_min < self.v_max:
            raise ValueError("v_min must be below v_max")
        if not self.q_s_max < self.s_s_max:
            raise ValueError("q_s_max must be below s_s_max")
        if self.q_s_max < 0:
            raise ValueError("q_s_max must be non-negative")

    @property
    def p_s_max(self) -> float:
        return math.sqrt(self.s_s_max ** 2 - self.q_s_max ** 2)

    @classmethod
    def loose(cls) -> "GridLimits":
        return cls(v_min=0.0, v_max=2.0, s_s_max=1e3, q_s_max=1e2)


@dataclass(frozen=True)
class NetworkModel:
    buses: tuple
    lines: tuple
    bases: Bases = field(default_factory=Bases)
    slack_voltage: float | tuple = 1.0
    limits: GridLimits = field(default_factory=GridLimits)
    name: str = "network"

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "lines", tuple(self.lines))
        if not isinstance(self.slack_voltage, (int, float)):
            object.__setattr__(self, "slack_voltage", tuple(float(v) for v in self.slack_voltage))
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate bus ids")
        if sum(b.kind == SLACK for b in self.buses) != 1:
            raise ValueError("network needs exactly one slack bus")
        index = {b: k for k, b in enumerate(ids)}
        for ln in self.lines:
            if ln.from_bus not in index or ln.to_bus not in index:
                raise ValueError(f"line {ln.from_bus}-{ln.to_bus} references unknown bus")
            if ln.from_bus == ln.to_bus:
                raise ValueError(f"line {ln.from_bus}-{ln.to_bus} is a self loop")
            if ln.r < 0:
                raise ValueError(f"line {ln.from_bus}-{ln.to_bus} has negative resistance")
        n = len(ids)
        if n > 1:
            rows = [index[ln.from_bus] for ln in self.lines]
            cols = [index[ln.to_bus] for ln in self.lines]
            graph = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
            if connected_components(graph, directed=False)[0] != 1:
                raise ValueError("network graph is not connected")
        sv = np.atleast_1d(np.asarray(self.slack_voltage, dtype=float))
        if np.any(~np.isfinite(sv)) or np.any(sv <= 0):
            raise ValueError("slack voltage must be positive")

    @property
    def n(self) -> int:
        return len(self.buses)

    @property
    def bus_ids(self) -> list:
        return [b.id for b in self.buses]

    def index(self, bus_id: str) -> int:
        for k, b in enumerate(self.buses):
            if b.id == bus_id:
                return k
        raise KeyError(bus_id)

    @property
    def slack(self) -> int:
        return next(k for k, b in enumerate(self.buses) if b.kind == SLACK)

    @property
    def pq(self) -> np.ndarray:
        """Indices of the non-slack buses, in bus order."""
        return np.array([k for k, b in enumerate(self.buses) if b.kind != SLACK], dtype=int)

    @property
    def pq_ids(self) -> list:
        return [self.buses[k].id for k in self.pq]

    def pq_position(self, bus_id: str) -> int:
        """Position of a non-slack bus within the ``pq`` ordering."""
        return self.pq_ids.index(bus_id)

    def slack_voltage_at(self, t: int = 0) -> float:
        if isinstance(self.slack_voltage, tuple):
            return self.slack_voltage[t]
        return float(self.slack_voltage)

    def with_slack_voltage(self, value) -> "NetworkModel":
        return NetworkModel(self.buses, self.lines, self.bases, value, self.limits, self.name)

    def with_limits(self, limits: GridLimits) -> "NetworkModel":
        return NetworkModel(self.buses, self.lines, self.bases, self.slack_voltage, limits, self.name)

    def without_line(self, k: int) -> "NetworkModel":
        lines = self.lines[:k] + self.lines[k + 1:]
        return NetworkModel(self.buses, lines, self.bases, self.slack_voltage, self.limits, self.name)

    # -- serialization -------------------------------------------------
    def to_dict(self) -> dict:
        sv = self.slack_voltage
        return {
            "name": self.name,
            "bases": {"voltage_v": self.bases.voltage, "power_va": self.bases.power},
            "slack_voltage_pu": list(sv) if isinstance(sv, tuple) else sv,
            "buses": [{"id": b.id, "type": b.kind} for b in self.buses],
            "lines": [
                {"from": ln.from_bus, "to": ln.to_bus, "r_ohm": ln.r, "x_ohm": ln.x, "b_siemens": ln.b}
                for ln in self.lines
            ],
            "limits": {
                "v_min_pu": self.limits.v_min,
                "v_max_pu": self.limits.v_max,
                "s_slack_max_kva": self.limits.s_s_max * self.bases.power_kw,
                "q_slack_max_kvar": self.limits.q_s_max * self.bases.power_kw,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkModel":
        allowed = {"name", "bases", "slack_voltage_pu", "buses", "lines", "limits"}
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown network keys: {sorted(unknown)}")
        bd = d.get("bases", {})
        bases = Bases(float(bd.get("voltage_v", 400.0)), float(bd.get("power_va", 10e3)))
        buses = [Bus(str(b["id"]), str(b.get("type", PQ)).lower()) for b in d["buses"]]
        lines = [
            Line(str(ln["from"]), str(ln["to"]), float(ln["r_ohm"]), float(ln["x_ohm"]),
                 float(ln.get("b_siemens", 0.0)))
            for ln in d.get("lines", [])
        ]
        lim = d.get("limits")
        if lim is None:
            limits = GridLimits()
        else:
            limits = GridLimits(
                float(lim.get("v_min_pu", 0.9)),
                float(lim.get("v_max_pu", 1.05)),
                float(lim["s_slack_max_kva"]) / bases.power_kw,
                float(lim["q_slack_max_kvar"]) / bases.power_kw,
            )
        sv = d.get("slack_voltage_pu", 1.0)
        sv = float(sv) if isinstance(sv, (int, float)) else tuple(float(v) for v in sv)
        return cls(buses, lines, bases, sv, limits, str(d.get("name", "network")))


def load_network(path) -> NetworkModel:
    with open(path) as fh:
        return NetworkModel.from_dict(json.load(fh))


def save_network(model: NetworkModel, path) -> None:
    with open(path, "w") as fh:
        json.dump(model.to_dict(), fh, indent=2)
        fh.write("\n")


# line data of the laboratory feeder, ohm per phase
REPLICA_LINES = (
    ("N1", "N3", 0.5851, 0.3057),  # Z1+Z2
    ("N3", "N4", 0.1941, 0.1613),  # Z3
    ("N4", "N5", 0.2161, 0.1778),  # Z4
    ("N4", "N6", 0.2000, 0.0),     # Zc
    ("N6", "N7", 0.5970, 0.2962),  # Z5
    ("N7", "N9", 0.1944, 0.1664),  # Z6+Z7
)
REPLICA_PROSUMER_BUSES = ("N3", "N4", "N5", "N7", "N9")


def replica_network(slack_voltage=1.0, limits: GridLimits | None = None) -> NetworkModel:
    """Radial laboratory feeder with prosumers at N3, N4, N5, N7 and N9.

    Pass-through nodes without injections (N2, N8) are folded into the
    combined series impedances; N6 is kept as a zero-injection junction.
    """
    buses = [Bus("N1", SLACK)] + [Bus(b) for b in ("N3", "N4", "N5", "N6", "N7", "N9")]
    lines = [Line(a, b, r, x) for a, b, r, x in REPLICA_LINES]
    limits = limits or GridLimits(v_min=0.9, v_max=1.05, s_s_max=3.0, q_s_max=0.3)
    return NetworkModel(buses, lines, Bases(400.0, 10e3), slack_voltage, limits, "replica")


def build_admittance(model: NetworkModel) -> np.ndarray:
    """Dense complex bus admittance matrix in per unit.

    Parallel lines between the same pair of buses add up.
    """
    n = model.n
    Y = np.zeros((n, n), dtype=complex)
    zb = model.bases.impedance
    for ln in model.lines:
        z = complex(ln.r, ln.x) / zb
        if z == 0:
            raise ValueError(f"degenerate branch {ln.from_bus}-{ln.to_bus}")
        ys = 1.0 / z
        ysh = 0.5j * ln.b * zb
        i, j = model.index(ln.from_bus), model.index(ln.to_bus)
        Y[i, i] += ys + ysh
        Y[j, j] += ys + ysh
        Y[i, j] -= ys
        Y[j, i] -= ys
    return Y


@dataclass(frozen=True)
class OperatingPoint:
    """Per-bus demand of the non-slack buses, shape ``(K, n_buses - 1)``, per unit."""

    p: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        p = np.atleast_2d(np.asarray(self.p, dtype=float))
        q = np.atleast_2d(np.asarray(self.q, dtype=float))
        if p.shape != q.shape:
            raise ValueError("p and q shapes differ")
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q))):
            raise ValueError("operating point has non-finite entries")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)

    @property
    def K(self) -> int:
        return self.p.shape[0]

    @classmethod
    def zeros(cls, model: NetworkModel, K: int = 1) -> "OperatingPoint":
        z = np.zeros((K, model.n - 1))
        return cls(z, z.copy())

    def step(self, t: int) -> "OperatingPoint":
        return OperatingPoint(self.p[t:t + 1], self.q[t:t + 1])

    def vector(self) -> np.ndarray:
        """Flattened ``[p; q]`` per step, length ``2 * (n_buses - 1) * K``."""
        return np.concatenate([self.p, self.q], axis=1).ravel()


@dataclass(frozen=True)
class PowerFlowSolution:
    v: np.ndarray
    theta: np.ndarray
    p_s: float
    q_s: float
    converged: bool
    iterations: int
    mismatch: float


def _derivatives(Y, V):
    """Partial derivatives of complex bus injections w.r.t. angle and magnitude."""
    I = Y @ V
    Vn = V / np.abs(V)
    dS_dVm = V[:, None] * np.conj(Y * Vn[None, :]) + np.diag(np.conj(I) * Vn)
    dS_dVa = 1j * V[:, None] * np.conj(np.diag(I) - Y * V[None, :])
    return dS_dVa, dS_dVm


def solve_power_flow(model: NetworkModel, op: OperatingPoint, t: int = 0, *, tol: float = 1e-8,
                     max_iter: int = 50, Y: np.ndarray | None = None) -> PowerFlowSolution:
    """Newton-Raphson power flow in polar form from a flat start.

    ``t`` selects the timestep of ``op`` and of the slack-voltage series.
    A result with ``converged=False`` carries the last iterate for
    diagnostics only.
    """
    if Y is None:
        Y = build_admittance(model)
    n, s, pq = model.n, model.slack, model.pq
    m = pq.size
    vs = model.slack_voltage_at(t)
    s_spec = np.zeros(n, dtype=complex)
    s_spec[pq] = -(op.p[t] + 1j * op.q[t])
    vm = np.full(n, vs)
    va = np.zeros(n)
    converged, err, it = False, math.inf, 0
    for it in range(max_iter + 1):
        V = vm * np.exp(1j * va)
        mis = V * np.conj(Y @ V) - s_spec
        err = float(np.max(np.abs(mis[pq]))) if m else 0.0
        if not math.isfinite(err):
            break
        if err <= tol:
            converged = True
            break
        if it == max_iter:
            break
        dS_dVa, dS_dVm = _derivatives(Y, V)
        J = np.block([
            [dS_dVa[np.ix_(pq, pq)].real, dS_dVm[np.ix_(pq, pq)].real],
            [dS_dVa[np.ix_(pq, pq)].imag, dS_dVm[np.ix_(pq, pq)].imag],
        ])
        try:
            dx = np.linalg.solve(J, -np.concatenate([mis[pq].real, mis[pq].imag]))
        except np.linalg.LinAlgError:
            break
        va[pq] += dx[:m]
        vm[pq] += dx[m:]
    V = vm * np.exp(1j * va)
    ss = V[s] * np.conj(Y[s] @ V)
    return PowerFlowSolution(np.abs(V), np.angle(V), float(ss.real), float(ss.imag),
                             converged, it, err)


@dataclass(frozen=True)
class SensitivityMatrices:
    """First-order model of |v| and slack injections around a converged point.

    Rows and columns follow the ``pq`` bus ordering; derivatives are with
    respect to bus demand (load-positive) in per unit.
    """

    K_vp: np.ndarray
    K_vq: np.ndarray
    k_psp: np.ndarray  # d p_s / d p
    k_psq: np.ndarray  # d p_s / d q
    k_qsp: np.ndarray  # d q_s / d p
    k_qsq: np.ndarray  # d q_s / d q
    v_star: np.ndarray
    p_s_star: float
    q_s_star: float
    p_star: np.ndarray
    q_star: np.ndarray


def compute_sensitivities(model: NetworkModel, op: OperatingPoint, t: int = 0, *,
                          Y: np.ndarray | None = None) -> SensitivityMatrices:
    """Sensitivities by implicit differentiation of the power-flow equations."""
    if Y is None:
        Y = build_admittance(model)
    pf = solve_power_flow(model, op, t, Y=Y)
    if not pf.converged:
        raise ValueError("linearization point infeasible")
    pq, s = model.pq, model.slack
    m = pq.size
    V = pf.v * np.exp(1j * pf.theta)
    dS_dVa, dS_dVm = _derivatives(Y, V)
    J = np.block([
        [dS_dVa[np.ix_(pq, pq)].real, dS_dVm[np.ix_(pq, pq)].real],
        [dS_dVa[np.ix_(pq, pq)].imag, dS_dVm[np.ix_(pq, pq)].imag],
    ])
    # mismatch = S(state) + (p + jq) = 0  =>  d state = -J^{-1} d[p; q]
    X = -np.linalg.solve(J, np.eye(2 * m))
    ds_slack = np.concatenate([dS_dVa[s, pq], dS_dVm[s, pq]]) @ X
    return SensitivityMatrices(
        K_vp=X[m:, :m], K_vq=X[m:, m:],
        k_psp=ds_slack[:m].real, k_psq=ds_slack[m:].real,
        k_qsp=ds_slack[:m].imag, k_qsq=ds_slack[m:].imag,
        v_star=pf.v[pq], p_s_star=pf.p_s, q_s_star=pf.q_s,
        p_star=op.p[t].copy(), q_star=op.q[t].copy(),
    )


def demand_to_operating_point(model: NetworkModel, attachments: Sequence[str],
                              x: np.ndarray, K: int) -> OperatingPoint:
    """Aggregate stacked prosumer demand (kW/kvar) into per-bus per-unit demand."""
    x = np.asarray(x, dtype=float).reshape(len(attachments), K, 2)
    p = np.zeros((K, model.n - 1))
    q = np.zeros((K, model.n - 1))
    for i, bus in enumerate(attachments):
        j = model.pq_position(bus)
        p[:, j] += x[i, :, 0]
        q[:, j] += x[i, :, 1]
    return OperatingPoint(model.bases.kw_to_pu(p), model.bases.kw_to_pu(q))


@dataclass
class LinearizedConstraints:
    """Grid limits linearized around an operating point, ``A x <= b``.

    ``A`` is block diagonal in time. Columns are partitioned per prosumer by
    ``offsets``; ``block(i)`` returns prosumer ``i``'s slice ``A_i``. The
    equality block is always present and empty for voltage limits.
    """

    A: sp.csr_matrix
    b: np.ndarray
    A_eq: sp.csr_matrix
    b_eq: np.ndarray
    labels: list
    offsets: np.ndarray
    attachments: tuple
    monitored: tuple
    limits: GridLimits
    K: int
    op: OperatingPoint
    row_scale: np.ndarray = None
    _blocks: list = field(default=None, repr=False)
    _grams: dict = field(default=None, repr=False)

    @property
    def m(self) -> int:
        return self.A.shape[0]

    @property
    def n_prosumers(self) -> int:
        return len(self.attachments)

    def block(self, i: int) -> sp.csr_matrix:
        if self._blocks is None:
            csc = self.A.tocsc()
            self._blocks = [
                csc[:, self.offsets[k]:self.offsets[k + 1]].tocsr()
                for k in range(self.n_prosumers)
            ]
        return self._blocks[i]

    def gram(self, i: int) -> tuple:
        """Cached ``(A_i', A_i' A_i)`` used to build price signals."""
        if self._grams is None:
            self._grams = {}
        if i not in self._grams:
            At = self.block(i).T.tocsr()
            self._grams[i] = (At, (At @ self.block(i)).tocsr())
        return self._grams[i]

    def split(self, x: np.ndarray) -> list:
        return [x[self.offsets[i]:self.offsets[i + 1]] for i in range(self.n_prosumers)]

    def dot(self, x: np.ndarray) -> np.ndarray:
        """``A x`` evaluated as the partition sum ``sum_i A_i x_i``."""
        total = np.zeros(self.m)
        for i, xi in enumerate(self.split(np.asarray(x, dtype=float))):
            total = total + self.block(i) @ xi
        return total

    def slack(self, x: np.ndarray) -> np.ndarray:
        """``A x - b`` converted back to per unit (positive means violated)."""
        return (self.dot(x) - self.b) / self.row_scale

    def violation(self, x: np.ndarray) -> float:
        """Largest linearized violation in per unit."""
        return float(max(0.0, np.max(self.slack(x), initial=0.0)))

    def to_dense(self) -> np.ndarray:
        return self.A.toarray()

    def dump(self) -> str:
        """Row-major dense dump with labels, for debugging."""
        dense = self.to_dense()
        out = []
        for label, row, rhs in zip(self.labels, dense, self.b):
            kind, bus, t = label
            coeffs = " ".join(f"{v:.6e}" for v in row)
            out.append(f"{kind} {bus} {t} | {coeffs} | {rhs:.6e}")
        return "\n".join(out)


def assemble_dso_constraints(model: NetworkModel, op: OperatingPoint, attachments: Sequence[str],
                             limits: GridLimits | None = None, *, monitored: Sequence[str] | None = None,
                             sensitivities: Sequence[SensitivityMatrices] | None = None,
                             equilibrate: bool = True, row_scale: np.ndarray | None = None
                             ) -> LinearizedConstraints:
    """Linearize voltage and slack limits around ``op`` for every timestep.

    Rows per timestep: upper then lower voltage bound for each monitored bus,
    then slack reactive (upper, lower) and slack active (upper, lower).

    With ``equilibrate`` each row is multiplied by a positive factor so that
    its largest coefficient is one per unit of power; ``row_scale`` fixes the
    factors explicitly (used when re-linearizing, so that copied vectors and
    multipliers keep their meaning). ``A x <= b`` is unaffected by the
    scaling, but residuals and multipliers are measured in scaled units.
    """
    limits = limits or model.limits
    K = op.K
    attachments = tuple(attachments)
    monitored = tuple(monitored) if monitored is not None else tuple(model.pq_ids)
    mon = np.array([model.pq_position(b) for b in monitored], dtype=int)
    cols = np.array([model.pq_position(b) for b in attachments], dtype=int)
    N = len(attachments)
    if sensitivities is None:
        Y = build_admittance(model)
        sensitivities = [compute_sensitivities(model, op, t, Y=Y) for t in range(K)]
    scale = 1.0 / model.bases.power_kw
    nm = mon.size
    mt = 2 * nm + 4
    offsets = np.arange(N + 1) * 2 * K

    rows, colidx, vals = [], [], []
    b = np.empty(K * mt)
    labels = []
    p_max = limits.p_s_max
    for t, S in enumerate(sensitivities):
        ps, qs = S.p_star, S.q_star
        # coefficient block over (p_i, q_i) of each prosumer, shape (mt, 2N)
        kv = np.empty((nm, 2 * N))
        kv[:, 0::2] = S.K_vp[np.ix_(mon, cols)]
        kv[:, 1::2] = S.K_vq[np.ix_(mon, cols)]
        kq = np.empty(2 * N)
        kq[0::2], kq[1::2] = S.k_qsp[cols], S.k_qsq[cols]
        kp = np.empty(2 * N)
        kp[0::2], kp[1::2] = S.k_psp[cols], S.k_psq[cols]
        block = np.vstack([kv, -kv, kq, -kq, kp, -kp]) * scale

        v_lin0 = S.v_star[mon] - S.K_vp[mon] @ ps - S.K_vq[mon] @ qs
        q_lin0 = S.q_s_star - S.k_qsp @ ps - S.k_qsq @ qs
        p_lin0 = S.p_s_star - S.k_psp @ ps - S.k_psq @ qs
        r0 = t * mt
        b[r0:r0 + nm] = limits.v_max - v_lin0
        b[r0 + nm:r0 + 2 * nm] = v_lin0 - limits.v_min
        b[r0 + 2 * nm:r0 + mt] = [
            limits.q_s_max - q_lin0, limits.q_s_max + q_lin0,
            p_max - p_lin0, p_max + p_lin0,
        ]
        labels += [(V_MAX, bus, t) for bus in monitored]
        labels += [(V_MIN, bus, t) for bus in monitored]
        slack_id = model.buses[model.slack].id
        labels += [(k, slack_id, t) for k in (QS_MAX, QS_MIN, PS_MAX, PS_MIN)]

        col_of = (offsets[:-1, None] + 2 * t + np.arange(2)[None, :]).ravel()
        rr, cc = np.nonzero(np.ones_like(block, dtype=bool))
        rows.append(rr + r0)
        colidx.append(col_of[cc])
        vals.append(block[rr, cc])

    n = 2 * K * N
    A = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(colidx))), shape=(K * mt, n)
    )
    A.sum_duplicates()
    A.sort_indices()
    if row_scale is None:
        row_scale = np.ones(K * mt)
        if equilibrate:
            # unit infinity-norm per row with columns measured in per unit power
            peak = np.abs(A).max(axis=1).toarray().ravel() * model.bases.power_kw
            row_scale = np.where(peak > 0, 1.0 / np.where(peak > 0, peak, 1.0), 1.0)
    row_scale = np.asarray(row_scale, dtype=float)
    A = (sp.diags(row_scale) @ A).tocsr()
    A.sort_indices()
    return LinearizedConstraints(
        A=A, b=b * row_scale, A_eq=sp.csr_matrix((0, n)), b_eq=np.zeros(0), labels=labels,
        offsets=offsets, attachments=attachments, monitored=monitored, limits=limits, K=K, op=op,
        row_scale=row_scale,
    )


def relinearize(model: NetworkModel, lin: LinearizedConstraints, x: np.ndarray) -> LinearizedConstraints:
    """Rebuild ``lin`` around the operating point induced by demand ``x``."""
    op = demand_to_operating_point(model, lin.attachments, x, lin.K)
    return assemble_dso_constraints(model, op, lin.attachments, lin.limits, monitored=lin.monitored,
                                    row_scale=lin.row_scale)


def evaluate_constraints(model: NetworkModel, lin: LinearizedConstraints, x: np.ndarray,
                         Y: np.ndarray | None = None) -> np.ndarray:
    """Nonlinear constraint values ``g(x)`` from the AC oracle, same row order as ``lin``.

    Raises ``ValueError("cannot evaluate g")`` if any power flow diverges.
    """
    if Y is None:
        Y = build_admittance(model)
    op = demand_to_operating_point(model, lin.attachments, x, lin.K)
    mon = np.array([model.pq_position(bus) for bus in lin.monitored], dtype=int)
    lim = lin.limits
    g = []
    for t in range(lin.K):
        pf = solve_power_flow(model, op, t, Y=Y)
        if not pf.converged:
            raise ValueError("cannot evaluate g")
        v = pf.v[model.pq][mon]
        g.append(np.concatenate([
            v - lim.v_max, lim.v_min - v,
            [pf.q_s - lim.q_s_max, -pf.q_s - lim.q_s_max, pf.p_s - lim.p_s_max, -pf.p_s - lim.p_s_max],
        ]))
    return np.concatenate(g)


def linearization_error(model: NetworkModel, lin: LinearizedConstraints, x: np.ndarray) -> float:
    """``max |g(x) - (A x - b)|`` with ``g`` from the AC oracle."""
    g = evaluate_constraints(model, lin, x)
    return float(np.max(np.abs(g - lin.slack(x)), initial=0.0))


@dataclass(frozen=True)
class VoltageProfile:
    """Oracle voltages over a horizon, shape ``(K, n_buses)``, plus slack injections."""

    v: np.ndarray
    p_s: np.ndarray
    q_s: np.ndarray
    converged: np.ndarray

    def max_violation(self, limits: GridLimits) -> float:
        over = np.max(self.v - limits.v_max, initial=-np.inf)
        under = np.max(limits.v_min - self.v, initial=-np.inf)
        return float(max(over, under, 0.0))


def voltage_profile(model: NetworkModel, op: OperatingPoint) -> VoltageProfile:
    Y = build_admittance(model)
    sols = [solve_power_flow(model, op, t, Y=Y) for t in range(op.K)]
    return VoltageProfile(
        v=np.array([s.v for s in sols]),
        p_s=np.array([s.p_s for s in sols]),
        q_s=np.array([s.q_s for s in sols]),
        converged=np.array([s.converged for s in sols]),
    )
