"""QP solvers: operator-splitting full solver and the equality-only KKT solve.

``solve_full`` handles ``min 1/2 y'Qy + p'y  s.t.  Aeq y = beq, Cineq y <= dvec``
with an over-relaxed ADMM iteration on the stacked constraint ``l <= K y <= u``
(equality rows have ``l = u``). Multipliers follow the sign convention
``Q y + p + Aeq' lam + Cineq' mu = 0`` with ``mu >= 0``.
"""

from __future__ import annotations

import enum
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import scipy.linalg
from numba import njit

from .problem import RANK_TOL, SparseQp


class Status(str, enum.Enum):
    SOLVED = "Solved"
    MAX_ITERATIONS = "MaxIterations"
    INFEASIBLE = "Infeasible"


class NotPositiveDefinite(np.linalg.LinAlgError):
    pass


class RankDeficient(np.linalg.LinAlgError):
    """The Schur complement E Q^-1 E' is singular: E has dependent rows."""


class SolverError(RuntimeError):
    def __init__(self, solution):
        super().__init__(f"full QP solve ended with status {solution.status.value} "
                         f"after {solution.iterations} iterations")
        self.solution = solution


@dataclass
class SolverConfig:
    tol: float = 1e-8
    max_iter: int = 20000
    rho: float = 1.0
    regularization: float = 1e-9
    sigma: float = 1e-6
    alpha: float = 1.6
    rho_eq_scale: float = 1e3
    scaling_iters: int = 10
    eps_pinf: float = 1e-7
    polish: bool = True

    @classmethod
    def from_dict(cls, d: dict | None) -> "SolverConfig":
        d = d or {}
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown solver config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class QpSolution:
    y_star: np.ndarray
    lambda_eq: np.ndarray
    mu_ineq: np.ndarray
    iterations: int
    status: Status
    solve_time: float
    polished: bool = False
    kkt: dict = field(default_factory=dict)

    @property
    def solved(self) -> bool:
        return self.status == Status.SOLVED

    def check(self) -> "QpSolution":
        if not self.solved:
            raise SolverError(self)
        return self


# ---------------------------------------------------------------------------
# dense SPD kernel


def cholesky_spd(M, regularization: float = 1e-9):
    """Lower Cholesky factor of ``M``; retries once with ``M + reg*I``."""
    M = np.asarray(M, dtype=float)
    try:
        return scipy.linalg.cho_factor(M, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        pass
    try:
        return scipy.linalg.cho_factor(M + regularization * np.eye(M.shape[0]), lower=True,
                                       check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite("matrix is not positive definite after regularization") from exc


def linear_solve_spd(M, rhs, regularization: float = 1e-9):
    """Solve ``M x = rhs`` by Cholesky with one step of iterative refinement."""
    M = np.asarray(M, dtype=float)
    rhs = np.asarray(rhs, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1] or M.shape[0] != rhs.shape[0]:
        raise ValueError(f"shape mismatch: M {M.shape}, rhs {rhs.shape}")
    factor = cholesky_spd(M, regularization)
    x = scipy.linalg.cho_solve(factor, rhs, check_finite=False)
    x += scipy.linalg.cho_solve(factor, rhs - M @ x, check_finite=False)
    return x


# ---------------------------------------------------------------------------
# equality-constrained KKT


def solve_kkt_equality(Qmat, pvec, Emat, fvec, q_factor=None):
    """Closed-form minimizer of ``1/2 y'Qy + p'y`` subject to ``E y = f``.

    Uses two Cholesky factorizations (Q and the Schur complement S = E Q^-1 E')
    in place of the explicit inverses::

        lam = -S^-1 (E Q^-1 p + f)
        y   = -Q^-1 (p + E' lam)

    followed by one step of iterative refinement.

    Parameters
    ----------
    Qmat : (nv, nv) SPD matrix
    pvec : (nv,) linear cost
    Emat : (ne, nv) full-row-rank constraint matrix
    fvec : (ne,) right-hand side
    q_factor : optional precomputed ``cho_factor`` of Qmat

    Returns
    -------
    y_star, lambda_star : ndarray

    Raises
    ------
    RankDeficient
        If S is singular relative to ``RANK_TOL`` (dependent rows in E).
    """
    Qmat = np.asarray(Qmat, dtype=float)
    pvec = np.asarray(pvec, dtype=float)
    Emat = np.atleast_2d(np.asarray(Emat, dtype=float))
    fvec = np.asarray(fvec, dtype=float)
    nv = Qmat.shape[0]
    if Qmat.shape != (nv, nv) or pvec.shape != (nv,) or Emat.shape[1] != nv \
            or fvec.shape != (Emat.shape[0],):
        raise ValueError("shape mismatch in KKT data")
    if Emat.shape[0] > nv:
        raise RankDeficient(f"{Emat.shape[0]} equality rows exceed {nv} variables")

    qf = q_factor if q_factor is not None else cholesky_spd(Qmat)
    QiEt = scipy.linalg.cho_solve(qf, Emat.T, check_finite=False)
    Qip = scipy.linalg.cho_solve(qf, pvec, check_finite=False)
    S = Emat @ QiEt
    S = 0.5 * (S + S.T)
    try:
        sf = scipy.linalg.cho_factor(S, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        raise RankDeficient("Schur complement is not positive definite") from None
    piv = np.abs(np.diag(sf[0]))
    if piv.size and piv.min() ** 2 <= RANK_TOL * piv.max() ** 2:
        raise RankDeficient("Schur complement is numerically singular")
    lam = -scipy.linalg.cho_solve(sf, Emat @ Qip + fvec, check_finite=False)
    y = -(Qip + QiEt @ lam)
    # one refinement step on the full KKT residual, reusing both factors
    r_stat = -(Qmat @ y + pvec + Emat.T @ lam)
    r_feas = fvec - Emat @ y
    Qir = scipy.linalg.cho_solve(qf, r_stat, check_finite=False)
    dlam = scipy.linalg.cho_solve(sf, Emat @ Qir - r_feas, check_finite=False)
    return y + Qir - QiEt @ dlam, lam + dlam


# ---------------------------------------------------------------------------
# operator splitting


def ruiz_scaling(P, K, iters: int):
    """Modified Ruiz equilibration of the KKT matrix (OSQP-style).

    Returns (D, E, c) such that the scaled data is c*D P D, c*D q, E K D.
    """
    nv, nr = P.shape[0], K.shape[0]
    D = np.ones(nv)
    E = np.ones(nr)
    c = 1.0
    Ps, Ks = P.copy(), K.copy()
    for _ in range(iters):
        col = np.maximum(np.abs(Ps).max(axis=0), np.abs(Ks).max(axis=0) if nr else 0.0)
        row = np.abs(Ks).max(axis=1) if nr else np.zeros(0)
        dD = 1.0 / np.sqrt(np.clip(col, 1e-4, 1e4))
        dE = 1.0 / np.sqrt(np.clip(row, 1e-4, 1e4))
        Ps = dD[:, None] * Ps * dD[None, :]
        Ks = dE[:, None] * Ks * dD[None, :]
        D *= dD
        E *= dE
    c = 1.0 / np.clip(np.abs(Ps).max(axis=0).mean(), 1e-4, 1e4)
    return D, E, c


@njit(cache=True, nogil=True)
def _chol_solve(L, b, out):
    n = L.shape[0]
    for i in range(n):
        s = b[i]
        for j in range(i):
            s -= L[i, j] * out[j]
        out[i] = s / L[i, i]
    for i in range(n - 1, -1, -1):
        s = out[i]
        for j in range(i + 1, n):
            s -= L[j, i] * out[j]
        out[i] = s / L[i, i]


@njit(cache=True, nogil=True)
def _admm_loop(P, q, K, KT, lo, hi, rho, L, sigma, alpha, D, E, cinv, x, z, y,
               tol, max_iter, eps_pinf):
    nv = P.shape[0]
    nr = K.shape[0]
    xt = np.empty(nv)
    Kx = K @ x
    dy = np.empty(nr)
    status = 1  # 0 solved, 1 max iterations, 2 infeasible
    it = 0
    for it in range(1, max_iter + 1):
        # x-update: (P + sigma I + K' diag(rho) K) xt = sigma x - q + K'(rho z - y)
        rhs = sigma * x - q + KT @ (rho * z - y)
        _chol_solve(L, rhs, xt)
        zt = K @ xt
        x[:] = alpha * xt + (1.0 - alpha) * x
        Kx[:] = alpha * zt + (1.0 - alpha) * Kx
        for r in range(nr):
            v = alpha * zt[r] + (1.0 - alpha) * z[r]
            zn = v + y[r] / rho[r]
            if zn < lo[r]:
                zn = lo[r]
            elif zn > hi[r]:
                zn = hi[r]
            ynew = y[r] + rho[r] * (v - zn)
            dy[r] = ynew - y[r]
            y[r] = ynew
            z[r] = zn

        # residuals in original units
        prim = np.max(np.abs(Kx - z) / E) if nr > 0 else 0.0
        dual = np.max(np.abs(P @ x + q + KT @ y) / D) * cinv
        if prim <= tol and dual <= tol:
            status = 0
            break

        # primal infeasibility certificate on the dual step
        if it % 10 != 0 or nr == 0:
            continue
        dnorm = np.max(np.abs(E * dy))
        if dnorm <= 1e-12:
            continue
        kt = np.max(np.abs(KT @ dy) / D)
        if kt > eps_pinf * dnorm:
            continue
        support = 0.0
        finite = True
        for r in range(nr):
            if dy[r] > 0.0:
                if hi[r] > 1e19:
                    finite = False
                    break
                support += hi[r] * dy[r]
            elif dy[r] < 0.0:
                if lo[r] < -1e19:
                    finite = False
                    break
                support += lo[r] * dy[r]
        if finite and support < -eps_pinf * dnorm:
            status = 2
            break
    return status, it


def independent_rows(Aeq, C):
    """Indices of a maximal subset of rows of ``C`` independent of each other and of ``Aeq``.

    Degenerate active sets (for example a bound active at every stage of a
    saturated ramp) contain rows implied by the others. Dropping them keeps
    the reduced KKT system solvable without changing its solution.
    """
    if C.shape[0] == 0:
        return np.zeros(0, dtype=int)
    basis, _ = np.linalg.qr(Aeq.T)
    resid = C - (C @ basis) @ basis.T
    _, R, piv = scipy.linalg.qr(resid.T, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    scale = max(1.0, float(np.max(np.linalg.norm(C, axis=1))))
    rank = int(np.sum(diag > np.sqrt(RANK_TOL) * scale))
    return np.sort(piv[:rank])


def kkt_residuals(qp: SparseQp, y, lam, mu) -> dict:
    stat = qp.Qmat @ y + qp.pvec + qp.Aeq.T @ lam + qp.Cineq.T @ mu
    eq = qp.Aeq @ y - qp.beq
    slack = qp.dvec - qp.Cineq @ y
    return {
        "stationarity": float(np.max(np.abs(stat))) if stat.size else 0.0,
        "eq_residual": float(np.max(np.abs(eq))) if eq.size else 0.0,
        "ineq_violation": float(max(0.0, -slack.min())) if slack.size else 0.0,
        "dual_negativity": float(max(0.0, -mu.min())) if mu.size else 0.0,
        "complementarity": float(np.max(np.abs(mu * slack))) if mu.size else 0.0,
    }


def _kkt_ok(r: dict, tol: float) -> bool:
    return (r["stationarity"] <= tol and r["eq_residual"] <= tol
            and r["ineq_violation"] <= tol and r["dual_negativity"] <= tol)


def _polish(qp: SparseQp, mu, tol, q_factor):
    active = np.flatnonzero(mu > tol)
    E = np.vstack([qp.Aeq, qp.Cineq[active]])
    f = np.concatenate([qp.beq, qp.dvec[active]])
    try:
        y, lam = solve_kkt_equality(qp.Qmat, qp.pvec, E, f, q_factor=q_factor)
    except RankDeficient:
        return None
    neq = qp.Aeq.shape[0]
    mu_p = np.zeros(qp.n_ineq)
    mu_p[active] = lam[neq:]
    return y, lam[:neq], mu_p


def solve_full(qp: SparseQp, warm_start=None, cfg: SolverConfig | None = None) -> QpSolution:
    """Solve the full QP with over-relaxed ADMM.

    ``warm_start`` is ``None`` or a dict with ``y0`` and optionally ``duals0``
    (a ``(lambda_eq, mu_ineq)`` pair, unscaled). The returned solution is
    checked against the KKT conditions at ``cfg.tol``.
    """
    cfg = cfg or SolverConfig()
    t0 = time.perf_counter()
    nv, neq, nin = qp.n_var, qp.Aeq.shape[0], qp.n_ineq
    K = np.vstack([qp.Aeq, qp.Cineq])
    lo = np.concatenate([qp.beq, np.full(nin, -np.inf)])
    hi = np.concatenate([qp.beq, qp.dvec])

    D, Es, c = ruiz_scaling(qp.Qmat, K, cfg.scaling_iters)
    Ps = c * (D[:, None] * qp.Qmat * D[None, :])
    qs = c * D * qp.pvec
    Ks = Es[:, None] * K * D[None, :]
    los = np.where(np.isfinite(lo), Es * lo, -1e20)
    his = np.where(np.isfinite(hi), Es * hi, 1e20)
    rho = np.full(neq + nin, cfg.rho)
    rho[:neq] *= cfg.rho_eq_scale

    M = Ps + cfg.sigma * np.eye(nv) + Ks.T @ (rho[:, None] * Ks)
    L = np.tril(cholesky_spd(M, cfg.regularization)[0])

    x = np.zeros(nv)
    yd = np.zeros(neq + nin)
    if warm_start is not None and warm_start.get("y0") is not None:
        y0 = np.asarray(warm_start["y0"], dtype=float)
        if y0.shape != (nv,):
            raise ValueError(f"warm start y0 has shape {y0.shape}, expected {(nv,)}")
        x = y0 / D
        duals = warm_start.get("duals0")
        if duals is not None:
            yd = c * np.concatenate([np.asarray(duals[0], float), np.asarray(duals[1], float)]) / Es
    z = np.clip(Ks @ x, los, his)

    code, iters = _admm_loop(Ps, qs, Ks, np.ascontiguousarray(Ks.T), los, his, rho, L,
                             cfg.sigma, cfg.alpha, D, Es, 1.0 / c, x, z, yd,
                             cfg.tol, cfg.max_iter, cfg.eps_pinf)
    y = D * x
    duals = Es * yd / c
    lam, mu = duals[:neq], np.maximum(duals[neq:], 0.0)
    status = (Status.SOLVED, Status.MAX_ITERATIONS, Status.INFEASIBLE)[code]

    polished = False
    kkt = kkt_residuals(qp, y, lam, mu)
    if status == Status.SOLVED and cfg.polish:
        out = _polish(qp, mu, cfg.tol, None)
        if out is not None:
            r = kkt_residuals(qp, *out)
            if _kkt_ok(r, cfg.tol) and r["complementarity"] <= kkt["complementarity"] + cfg.tol:
                y, lam, mu = out
                kkt, polished = r, True
    if status == Status.SOLVED and not _kkt_ok(kkt, cfg.tol):
        status = Status.MAX_ITERATIONS
    return QpSolution(y, lam, mu, int(iters), status, time.perf_counter() - t0, polished, kkt)
