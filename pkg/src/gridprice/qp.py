"""Convex quadratic programming with a KKT certificate.

Problems have the form::

    minimize    1/2 u'Pu + q'u
    subject to  A_eq u  = b_eq
                A_in u <= b_in
                lb <= u <= ub

and are solved with a primal-dual interior point method (Mehrotra
predictor-corrector). Dense and ``scipy.sparse`` inputs are both accepted;
the reduced KKT system is factorized with LAPACK for dense problems and
SuperLU for sparse ones. A solution is only reported ``optimal`` when the
KKT residuals, recomputed from scratch on the returned point, pass the
requested tolerance.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.linalg.lapack import dgbtrf as _gbtrf, dgbtrs as _gbtrs
from scipy.sparse.csgraph import reverse_cuthill_mckee

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
MAX_ITER = "max_iter"


class NonconvexError(ValueError):
    pass


def _as_matrix(M, shape):
    if M is None:
        return np.zeros(shape)
    if sp.issparse(M):
        return sp.csr_matrix(M, dtype=float)
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.size == 0:
        return np.zeros(shape)
    return M


def _as_vector(v, n, fill=0.0):
    if v is None:
        return np.full(n, fill)
    return np.asarray(v, dtype=float).reshape(-1)


@dataclass
class QuadraticProgram:
    """Container for a convex QP.

    ``P`` must be symmetric positive semidefinite. Any of the constraint
    blocks may be omitted. Infinite entries of ``lb``/``ub`` mean unbounded.
    """

    P: object
    q: np.ndarray
    A_eq: object = None
    b_eq: np.ndarray | None = None
    A_in: object = None
    b_in: np.ndarray | None = None
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float).reshape(-1)
        n = self.q.size
        self.P = _as_matrix(self.P, (n, n))
        if self.P.shape != (n, n):
            raise ValueError(f"P has shape {self.P.shape}, expected {(n, n)}")
        self.b_eq = _as_vector(self.b_eq, 0)
        self.A_eq = _as_matrix(self.A_eq, (self.b_eq.size, n))
        self.b_in = _as_vector(self.b_in, 0)
        self.A_in = _as_matrix(self.A_in, (self.b_in.size, n))
        self.lb = _as_vector(self.lb, n, -np.inf)
        self.ub = _as_vector(self.ub, n, np.inf)
        for name, M, rows in (("A_eq", self.A_eq, self.b_eq.size), ("A_in", self.A_in, self.b_in.size)):
            if M.shape != (rows, n):
                raise ValueError(f"{name} has shape {M.shape}, expected {(rows, n)}")
        if self.lb.size != n or self.ub.size != n:
            raise ValueError("bound vectors must have the same length as q")
        asym = self.P - self.P.T
        asym = abs(asym).max() if sp.issparse(asym) else np.abs(asym).max(initial=0.0)
        if asym > 1e-12 * max(1.0, _norm_inf(self.P)):
            raise ValueError("P is not symmetric")

    @property
    def n(self) -> int:
        return self.q.size

    @property
    def is_sparse(self) -> bool:
        return any(sp.issparse(M) for M in (self.P, self.A_eq, self.A_in))

    def objective(self, u) -> float:
        return float(0.5 * u @ (self.P @ u) + self.q @ u)

    def densified(self) -> "QuadraticProgram":
        dense = lambda M: M.toarray() if sp.issparse(M) else M
        return QuadraticProgram(dense(self.P), self.q, dense(self.A_eq), self.b_eq,
                                dense(self.A_in), self.b_in, self.lb, self.ub)

    def scaled(self, alpha: float) -> "QuadraticProgram":
        return QuadraticProgram(alpha * self.P, alpha * self.q, self.A_eq, self.b_eq,
                                self.A_in, self.b_in, self.lb, self.ub)

    def dump(self) -> str:
        """Coordinate-format text dump (``section row col value``) for debugging."""
        lines = [f"n {self.n} m_eq {self.b_eq.size} m_in {self.b_in.size}"]
        for name, M in (("P", self.P), ("A_eq", self.A_eq), ("A_in", self.A_in)):
            C = sp.coo_matrix(M)
            lines += [f"{name} {i} {j} {v:.17g}" for i, j, v in zip(C.row, C.col, C.data)]
        for name, v in (("q", self.q), ("b_eq", self.b_eq), ("b_in", self.b_in),
                        ("lb", self.lb), ("ub", self.ub)):
            lines += [f"{name} {i} {x:.17g}" for i, x in enumerate(v)]
        return "\n".join(lines) + "\n"


@dataclass
class KktResiduals:
    stationarity: float
    primal: float
    complementarity: float
    dual_sign: float
    gap: float


@dataclass
class QpSolution:
    u: np.ndarray
    status: str
    iterations: int
    objective: float
    y_eq: np.ndarray
    z_in: np.ndarray
    z_lb: np.ndarray
    z_ub: np.ndarray
    kkt: KktResiduals = field(repr=False)
    # working set of the active-set solver, reusable as a warm start
    active: list | None = field(default=None, repr=False)

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL


def _norm_inf(M) -> float:
    if sp.issparse(M):
        return float(abs(M).sum(axis=1).max()) if M.shape[0] else 0.0
    return float(np.abs(M).sum(axis=1).max(initial=0.0)) if M.size else 0.0


def check_convex(P) -> None:
    """Raise :class:`NonconvexError` when P has an eigenvalue below -1e-9*||P||."""
    scale = _norm_inf(P)
    if scale == 0.0:
        return
    Pd = P.toarray() if sp.issparse(P) else P
    try:
        np.linalg.cholesky(Pd + 1e-9 * scale * np.eye(Pd.shape[0]))
    except np.linalg.LinAlgError:
        raise NonconvexError("nonconvex objective") from None


def kkt_residuals(qp: QuadraticProgram, u, y_eq, z_in, z_lb, z_ub) -> KktResiduals:
    """KKT residuals of a candidate primal-dual point, all in the inf-norm."""
    grad = qp.P @ u + qp.q
    stat = grad + qp.A_eq.T @ y_eq + qp.A_in.T @ z_in + z_ub - z_lb
    slack_in = qp.b_in - qp.A_in @ u
    fin_l, fin_u = np.isfinite(qp.lb), np.isfinite(qp.ub)
    slack_lb = np.where(fin_l, u - np.where(fin_l, qp.lb, 0.0), 0.0)
    slack_ub = np.where(fin_u, np.where(fin_u, qp.ub, 0.0) - u, 0.0)
    primal = max(
        np.abs(qp.A_eq @ u - qp.b_eq).max(initial=0.0),
        (-slack_in).max(initial=0.0),
        (-slack_lb).max(initial=0.0),
        (-slack_ub).max(initial=0.0),
        0.0,
    )
    comp_lb = z_lb * slack_lb
    comp_ub = z_ub * slack_ub
    comp = max(np.abs(z_in * slack_in).max(initial=0.0), np.abs(comp_lb).max(initial=0.0),
               np.abs(comp_ub).max(initial=0.0))
    dual_sign = max((-z_in).max(initial=0.0), (-z_lb).max(initial=0.0),
                    (-z_ub).max(initial=0.0), 0.0)
    gap = float(z_in @ slack_in + comp_lb.sum() + comp_ub.sum())
    return KktResiduals(float(np.abs(stat).max(initial=0.0)), float(primal), float(comp),
                        float(dual_sign), abs(gap))


def certified(qp: QuadraticProgram, sol_kkt: KktResiduals, objective: float, tol: float) -> bool:
    return (
        sol_kkt.stationarity <= tol * (1.0 + np.abs(qp.q).max(initial=0.0))
        and sol_kkt.primal <= tol
        and sol_kkt.complementarity <= tol
        and sol_kkt.dual_sign <= 1e-10
        and sol_kkt.gap <= tol * (1.0 + abs(objective))
    )


class _Stacked:
    """All inequalities as C u <= d, with bounds kept diagonal for speed."""

    def __init__(self, qp: QuadraticProgram):
        self.G = qp.A_in
        self.GT = self.G.T.tocsr() if sp.issparse(self.G) else self.G.T
        self.h = qp.b_in
        self.iu = np.flatnonzero(np.isfinite(qp.ub))
        self.il = np.flatnonzero(np.isfinite(qp.lb))
        self.mg = self.h.size
        self.d = np.concatenate([self.h, qp.ub[self.iu], -qp.lb[self.il]])
        self.m = self.d.size
        self.n = qp.n

    def apply(self, u):
        return np.concatenate([self.G @ u, u[self.iu], -u[self.il]])

    def apply_t(self, z):
        out = np.array(self.GT @ z[: self.mg], dtype=float)
        k = self.mg + self.iu.size
        out[self.iu] += z[self.mg:k]
        out[self.il] -= z[k:]
        return out

    def bound_diag(self, w):
        diag = np.zeros(self.n)
        k = self.mg + self.iu.size
        diag[self.iu] += w[self.mg:k]
        diag[self.il] += w[k:]
        return diag


def _equalities_consistent(A, b, tol) -> bool:
    if b.size == 0:
        return True
    Ad = A.toarray() if sp.issparse(A) else A
    sol, *_ = np.linalg.lstsq(Ad, b, rcond=None)
    return np.abs(Ad @ sol - b).max() <= max(tol, 1e-9 * (1 + np.abs(b).max()))


_MAX_BANDWIDTH = 64
_DENSE_MAX = 120


class _SparseKkt:
    """Quasi-definite KKT matrix ``[[P + C'WC + rI, A'], [A, -rI]]``.

    The sparsity pattern is fixed for the whole solve; each interior point
    iteration only refreshes the numeric values before refactorizing.
    """

    def __init__(self, P, A, G, reg):
        n, p = P.shape[0], A.shape[0]
        self.n, N = n, n + p
        Pc, Ac = sp.coo_matrix(P), sp.coo_matrix(A)
        Gc = sp.csr_matrix(G)
        ti, tj, tr, tv = [], [], [], []
        for r in range(Gc.shape[0]):
            sl = slice(Gc.indptr[r], Gc.indptr[r + 1])
            idx, val = Gc.indices[sl], Gc.data[sl]
            ii, jj = np.meshgrid(idx, idx, indexing="ij")
            ti.append(ii.ravel())
            tj.append(jj.ravel())
            tv.append(np.outer(val, val).ravel())
            tr.append(np.full(ii.size, r))
        cat = lambda xs: np.concatenate(xs) if xs else np.zeros(0, dtype=int)
        ti, tj, tr, tv = cat(ti), cat(tj), cat(tr).astype(int), cat(tv).astype(float)
        ar_n, ar_p = np.arange(n), np.arange(p)
        rows = np.concatenate([Pc.row, Ac.col, n + Ac.row, n + ar_p, ar_n, ti])
        cols = np.concatenate([Pc.col, n + Ac.row, Ac.col, n + ar_p, ar_n, tj])
        keys = cols.astype(np.int64) * N + rows
        uniq, inv = np.unique(keys, return_inverse=True)
        nnz = uniq.size
        indices = (uniq % N).astype(np.int32)
        indptr = np.searchsorted(uniq // N, np.arange(N + 1)).astype(np.int32)
        # bandwidth-reducing symmetric ordering, computed once per solve
        tag = sp.csc_matrix((np.arange(1, nnz + 1, dtype=float), indices, indptr), shape=(N, N))
        self.perm = reverse_cuthill_mckee(tag, symmetric_mode=True)
        tag = tag[self.perm][:, self.perm].tocsc()
        tag.sort_indices()
        self.order = tag.data.astype(np.int64) - 1
        self.indices, self.indptr = tag.indices, tag.indptr
        self.shape = (N, N)
        n_fixed = Pc.nnz + 2 * Ac.nnz + p
        fixed_vals = np.concatenate([Pc.data, Ac.data, Ac.data, np.full(p, -reg)])
        self.fixed = np.bincount(inv[:n_fixed], weights=fixed_vals, minlength=nnz)
        self.pos_diag = inv[n_fixed:n_fixed + n]
        self.pos_trip = inv[n_fixed + n:]
        self.trip_row, self.trip_val = tr, tv
        self.nnz, self.reg = nnz, reg
        # banded LAPACK storage when the ordering leaves a narrow band
        col = np.repeat(np.arange(N), np.diff(self.indptr))
        off = self.indices - col
        lo, hi = int(max(off.max(initial=0), 0)), int(max(-off.min(initial=0), 0))
        self.band = None
        if max(lo, hi) <= _MAX_BANDWIDTH and N > 1:
            rows_ab = 2 * lo + hi + 1
            self.band = (lo, hi, rows_ab, (lo + hi + off) * N + col)

    def factor(self, diag, wg):
        data = self.fixed.copy()
        data[self.pos_diag] += diag + self.reg
        if self.trip_row.size:
            data += np.bincount(self.pos_trip, weights=self.trip_val * wg[self.trip_row],
                                minlength=self.nnz)
        K = sp.csc_matrix((data[self.order], self.indices, self.indptr), shape=self.shape)
        perm = self.perm
        inv = np.empty_like(perm)
        inv[perm] = np.arange(perm.size)
        if self.band is not None:
            lo, hi, rows_ab, pos = self.band
            ab = np.zeros(rows_ab * self.shape[0])
            ab[pos] = K.data
            lu, piv, info = _gbtrf(ab.reshape(rows_ab, -1), lo, hi)
            if info != 0:
                raise np.linalg.LinAlgError("singular KKT matrix")

            def solve_banded(r):
                x, _ = _gbtrs(lu, lo, hi, r[perm], piv)
                return x[inv]

            return _Factor(K, solve_banded, self.n, perm)
        lu = spla.splu(K, permc_spec="NATURAL", diag_pivot_thresh=0.0,
                       options=dict(SymmetricMode=True))

        def solve(r):
            return lu.solve(r[perm])[inv]

        return _Factor(K, solve, self.n, perm)


class _DenseKkt:
    def __init__(self, P, A, G, reg):
        self.P = P.toarray() if sp.issparse(P) else P
        self.A = A.toarray() if sp.issparse(A) else A
        self.G = G.toarray() if sp.issparse(G) else G
        self.reg = reg
        self.n = n = self.P.shape[0]
        p = self.A.shape[0]
        self.K0 = np.zeros((n + p, n + p))
        self.K0[:n, :n] = self.P
        self.K0[:n, n:] = self.A.T
        self.K0[n:, :n] = self.A
        self.K0[np.arange(n, n + p), np.arange(n, n + p)] = -reg
        self.diag = np.arange(n)

    def factor(self, diag, wg):
        n = self.n
        K = self.K0.copy()
        if self.G.size:
            K[:n, :n] += (self.G.T * wg) @ self.G
        K[self.diag, self.diag] += diag + self.reg
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", sla.LinAlgWarning)
            lu, piv = sla.lu_factor(K, check_finite=False)
        if not np.all(np.isfinite(lu)) or np.any(np.diag(lu) == 0):
            raise np.linalg.LinAlgError("singular KKT matrix")
        lu = (lu, piv)
        return _Factor(K, lambda r: sla.lu_solve(lu, r, check_finite=False), n)


class _Factor:
    def __init__(self, K, solve, n, perm=None):
        self.K, self._solve, self.n, self.perm = K, solve, n, perm

    def residual(self, rhs, x):
        if self.perm is None:
            return rhs - self.K @ x
        r = np.empty_like(rhs)
        r[self.perm] = self.K @ x[self.perm]
        return rhs - r

    def solve(self, r1, r2):
        rhs = np.concatenate([r1, r2])
        x = self._solve(rhs)
        # one step of iterative refinement against the regularized matrix
        x += self._solve(self.residual(rhs, x))
        return x[: self.n], x[self.n:]


def solve_qp(qp: QuadraticProgram, tol: float = 1e-8, max_iter: int = 20000,
             check_convexity: bool = True) -> QpSolution:
    """Solve ``qp`` to a KKT tolerance of ``tol``.

    Returns a :class:`QpSolution` whose ``status`` is ``"optimal"`` only when
    the certificate passes. ``"infeasible"`` is reported for inconsistent
    equalities or diverging multipliers; ``"max_iter"`` when the iteration
    budget runs out or progress stalls.

    Raises
    ------
    NonconvexError
        If ``P`` is not positive semidefinite.
    """
    if check_convexity:
        check_convex(qp.P)
    if qp.is_sparse and qp.n + qp.b_eq.size <= _DENSE_MAX:
        # sparse bookkeeping costs more than it saves on small systems
        qp = qp.densified()
    n = qp.n
    ineq = _Stacked(qp)
    m, p = ineq.m, qp.b_eq.size
    P, A, b, q = qp.P, qp.A_eq, qp.b_eq, qp.q
    AT = A.T.tocsr() if sp.issparse(A) else A.T

    def result(status, u, y, z, it):
        mg, k = ineq.mg, ineq.mg + ineq.iu.size
        z_in = z[:mg]
        z_ub = np.zeros(n)
        z_lb = np.zeros(n)
        z_ub[ineq.iu] = z[mg:k]
        z_lb[ineq.il] = z[k:]
        obj = qp.objective(u)
        res = kkt_residuals(qp, u, y, z_in, z_lb, z_ub)
        if status == OPTIMAL and not certified(qp, res, obj, tol):
            status = MAX_ITER
        elif status == MAX_ITER and certified(qp, res, obj, tol):
            # the loop stopped early (stall or breakdown) at a certifiable point
            status = OPTIMAL
        if status == MAX_ITER and not _equalities_consistent(A, b, tol):
            status = INFEASIBLE
        return QpSolution(u, status, it, obj, y, z_in, z_lb, z_ub, res)

    if np.any(qp.lb > qp.ub):
        return result(INFEASIBLE, np.zeros(n), np.zeros(p), np.zeros(m), 0)

    scale = max(1.0, np.abs(q).max(initial=0.0), _norm_inf(P))
    reg = 1e-11 * scale
    kkt = (_SparseKkt if qp.is_sparse else _DenseKkt)(P, A, ineq.G, reg)

    u = np.zeros(n)
    both = np.isfinite(qp.lb) & np.isfinite(qp.ub)
    u[both] = 0.5 * (qp.lb[both] + qp.ub[both])
    only_l = np.isfinite(qp.lb) & ~both
    only_u = np.isfinite(qp.ub) & ~both
    u[only_l] = qp.lb[only_l] + 1.0
    u[only_u] = qp.ub[only_u] - 1.0
    y = np.zeros(p)
    s = np.maximum(ineq.d - ineq.apply(u), 1.0)
    z = np.ones(m)
    has_quadratic = (P.nnz > 0) if sp.issparse(P) else bool(np.any(P))

    q_norm = 1.0 + np.abs(q).max(initial=0.0)
    d_norm = 1.0 + np.abs(ineq.d).max(initial=0.0) + np.abs(b).max(initial=0.0)
    inner_tol = 0.05 * tol
    best, best_it = np.inf, 0

    it = 0
    for it in range(1, max_iter + 1):
        Cu = ineq.apply(u)
        r_d = P @ u + q + AT @ y + ineq.apply_t(z)
        r_p = A @ u - b
        r_i = Cu + s - ineq.d
        mu = float(s @ z) / m if m else 0.0

        cz = (ineq.d - Cu) * z
        comp = np.abs(cz).max(initial=0.0) if m else 0.0
        err_d = np.abs(r_d).max(initial=0.0) / q_norm
        err_p = max(np.abs(r_p).max(initial=0.0), np.abs(r_i).max(initial=0.0))
        if err_d <= inner_tol and err_p <= inner_tol and comp <= inner_tol and mu <= inner_tol:
            # the certificate bounds the summed gap, not just its average
            if abs(cz.sum()) <= inner_tol * (1.0 + abs(qp.objective(u))):
                return result(OPTIMAL, u, y, z, it)

        merit = max(err_d, err_p, mu)
        if merit < 0.9 * best:
            best, best_it = merit, it
        elif it - best_it > 50:
            break
        if np.abs(z).max(initial=0.0) > 1e12 * scale and err_p > tol * d_norm:
            return result(INFEASIBLE, u, y, z, it)
        if not np.all(np.isfinite(u)):
            return result(MAX_ITER, np.zeros(n), np.zeros(p), np.zeros(m), it)

        w = z / s
        try:
            fac = kkt.factor(ineq.bound_diag(w), w[: ineq.mg])
        except (RuntimeError, np.linalg.LinAlgError, ValueError):
            break

        def direction(r_c):
            # r_c is the complementarity right-hand side for Z ds + S dz = r_c
            rhs1 = -r_d - ineq.apply_t(w * r_i + r_c / s)
            du, dy = fac.solve(rhs1, -r_p)
            dz = w * (ineq.apply(du) + r_i) + r_c / s
            ds = (r_c - s * dz) / z
            return du, dy, ds, dz

        # predictor
        du, dy, ds, dz = direction(-s * z)
        if m:
            a_p = _step_to_boundary(s, ds)
            a_d = _step_to_boundary(z, dz)
            mu_aff = float((s + a_p * ds) @ (z + a_d * dz)) / m
            sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
            # corrector
            du, dy, ds, dz = direction(-s * z - ds * dz + sigma * mu)
        if not (np.all(np.isfinite(du)) and np.all(np.isfinite(dz)) and np.all(np.isfinite(dy))):
            break
        a_p = min(1.0, 0.995 * _step_to_boundary(s, ds, cap=np.inf))
        a_d = min(1.0, 0.995 * _step_to_boundary(z, dz, cap=np.inf))
        if has_quadratic:
            a_p = a_d = min(a_p, a_d)
        u = u + a_p * du
        s = np.maximum(s + a_p * ds, 1e-300)
        y = y + a_d * dy
        z = np.maximum(z + a_d * dz, 1e-300)

    return result(MAX_ITER, u, y, z, it)


def _step_to_boundary(v, dv, cap=1.0):
    neg = dv < 0
    if not neg.any():
        return cap
    return float(min(cap, (-v[neg] / dv[neg]).min()))


def solve_qp_active_set(qp: QuadraticProgram, u0, working=None, tol: float = 1e-8,
                        max_iter: int = 200) -> QpSolution | None:
    """Primal active-set method started from a feasible point.

    Meant for small problems solved repeatedly over the same feasible set
    with a changing objective, where the previous solution and its working
    set ``working`` make a good start. Returns ``None`` when ``u0`` is not
    feasible, a subproblem is singular or the result does not certify; the
    caller then falls back to :func:`solve_qp`.
    """
    n = qp.n
    dense = lambda M: M.toarray() if sp.issparse(M) else np.asarray(M)
    P, A_eq, A_in = dense(qp.P), dense(qp.A_eq), dense(qp.A_in)
    lb, ub = qp.lb, qp.ub
    fixed = np.flatnonzero(lb == ub)
    free = lb < ub
    iu = np.flatnonzero(np.isfinite(ub) & free)
    il = np.flatnonzero(np.isfinite(lb) & free)
    eye = np.eye(n)
    E = np.vstack([A_eq, eye[fixed]])
    e = np.concatenate([qp.b_eq, lb[fixed]])
    G = np.vstack([A_in, eye[iu], -eye[il]])
    h = np.concatenate([qp.b_in, ub[iu], -lb[il]])
    m_e, m_g = E.shape[0], G.shape[0]
    feas = 1e-9 * (1.0 + np.abs(h).max(initial=0.0) + np.abs(e).max(initial=0.0))

    u = np.clip(np.asarray(u0, dtype=float), lb, ub)
    if np.abs(E @ u - e).max(initial=0.0) > feas or (G @ u - h).max(initial=0.0) > feas:
        return None
    W = [] if working is None else [i for i in working if i < m_g and abs(G[i] @ u - h[i]) <= feas]

    for it in range(1, max_iter + 1):
        C = np.vstack([E, G[W]])
        k = C.shape[0]
        K = np.zeros((n + k, n + k))
        K[:n, :n] = P
        K[:n, n:] = C.T
        K[n:, :n] = C
        grad = P @ u + qp.q
        try:
            sol = np.linalg.solve(K, np.concatenate([-grad, np.zeros(k)]))
        except np.linalg.LinAlgError:
            if it == 1 and W:
                W = []  # dependent warm working set, restart from the bare point
                continue
            return None
        step, nu = sol[:n], sol[n:]
        if np.abs(step).max(initial=0.0) <= 1e-11 * (1.0 + np.abs(u).max(initial=0.0)):
            z = nu[m_e:]
            if z.size and z.min() < -1e-12 * (1.0 + np.abs(grad).max(initial=0.0)):
                del W[int(np.argmin(z))]
                continue
            break
        Gs = G @ step
        slack = np.maximum(h - G @ u, 0.0)
        alpha, block = 1.0, -1
        mask = Gs > 1e-14
        mask[W] = False
        for i in np.flatnonzero(mask):
            ratio = slack[i] / Gs[i]
            if ratio < alpha:
                alpha, block = ratio, int(i)
        u = u + alpha * step
        if block >= 0:
            W.append(block)
    else:
        return None

    z = np.zeros(m_g)
    z[W] = np.maximum(nu[m_e:], 0.0)
    y_eq = nu[:qp.b_eq.size]
    nu_fixed = nu[qp.b_eq.size:m_e]
    z_in = z[:qp.b_in.size]
    z_ub = np.zeros(n)
    z_lb = np.zeros(n)
    z_ub[iu] = z[qp.b_in.size:qp.b_in.size + iu.size]
    z_lb[il] = z[qp.b_in.size + iu.size:]
    z_ub[fixed] = np.maximum(nu_fixed, 0.0)
    z_lb[fixed] = np.maximum(-nu_fixed, 0.0)
    u[fixed] = lb[fixed]
    obj = qp.objective(u)
    res = kkt_residuals(qp, u, y_eq, z_in, z_lb, z_ub)
    if not certified(qp, res, obj, tol):
        return None
    return QpSolution(u, OPTIMAL, it, obj, y_eq, z_in, z_lb, z_ub, res, active=sorted(W))
