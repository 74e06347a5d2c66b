"""Small dense solvers for linear complementarity problems and bound-constrained QPs.

The LCP(q, F) asks for lam >= 0 such that y = F lam + q >= 0 and lam' y = 0.
Three routes are provided:

    solve_lcp_lemke   -- complementary pivoting, works for P-matrices
    solve_lcp_qp      -- convex QP route, requires symmetric positive (semi)definite F
    brute_force_lcp   -- active-set enumeration, exponential, oracle use only

All routes are deterministic: pivot ties break by lowest index and the QP
route uses a fixed-iteration first-order method with an active-set polish.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np


class LcpStatus(enum.Enum):
    SOLVED = "solved"
    RAY_TERMINATION = "ray_termination"
    MAX_ITERATIONS = "max_iterations"


@dataclass(frozen=True)
class Lcp:
    """Problem data for LCP(q, F): find lam >= 0 with y = F lam + q >= 0, lam' y = 0."""

    q: np.ndarray
    F: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float).reshape(-1)
        F = np.asarray(self.F, dtype=float)
        if F.ndim != 2 or F.shape[0] != F.shape[1]:
            raise ValueError(f"F must be square, got shape {F.shape}")
        if F.shape[0] != q.shape[0]:
            raise ValueError(f"dimension mismatch: q has {q.shape[0]}, F has {F.shape[0]}")
        if not (np.isfinite(q).all() and np.isfinite(F).all()):
            raise ValueError("LCP data must be finite")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "F", F)

    @property
    def m(self) -> int:
        return self.q.shape[0]


@dataclass
class LcpSolution:
    lam: np.ndarray
    y: np.ndarray
    comp_residual: float
    status: LcpStatus


def complementarity_residual(lam: np.ndarray, y: np.ndarray) -> float:
    """Worst violation of lam >= 0, y >= 0, lam_i y_i = 0 over all coordinates."""
    lam = np.asarray(lam, dtype=float)
    y = np.asarray(y, dtype=float)
    if lam.size == 0:
        return 0.0
    viol = max(np.max(np.abs(lam * y)), np.max(-lam, initial=0.0), np.max(-y, initial=0.0))
    return float(viol)


# ---------------------------------------------------------------------------
# Lemke complementary pivoting
# ---------------------------------------------------------------------------

_PIVOT_TOL = 1e-10
_RATIO_TOL = 1e-9


def solve_lcp_lemke(p: Lcp, max_pivots: int | None = None) -> LcpSolution:
    """Lemke's algorithm with an artificial covering variable.

    Ties in the min-ratio test break by lowest row index, except that the
    artificial variable's row wins when tied (required for termination).  If
    the pivot cap (default 50*m) is hit, the solve retries once on a copy of
    q perturbed by a graded 1e-12 offset before reporting MAX_ITERATIONS.
    """
    if max_pivots is None:
        max_pivots = 50 * max(p.m, 1)
    sol = _lemke_once(p.q, p.F, max_pivots)
    if sol.status is LcpStatus.MAX_ITERATIONS:
        # degenerate tie cycling: graded perturbation, then score against original q
        q_pert = p.q + 1e-12 * (1.0 + np.arange(p.m))
        retry = _lemke_once(q_pert, p.F, max_pivots)
        if retry.status is LcpStatus.SOLVED:
            y = p.F @ retry.lam + p.q
            return LcpSolution(retry.lam, y, complementarity_residual(retry.lam, y), LcpStatus.SOLVED)
    return sol


def _lemke_once(q: np.ndarray, F: np.ndarray, max_pivots: int) -> LcpSolution:
    m = q.shape[0]
    if m == 0:
        return LcpSolution(np.zeros(0), np.zeros(0), 0.0, LcpStatus.SOLVED)
    if np.min(q) >= 0.0:
        lam = np.zeros(m)
        return LcpSolution(lam, q.copy(), complementarity_residual(lam, q), LcpStatus.SOLVED)

    # tableau columns: [w_0..w_{m-1} | z_0..z_{m-1} | z0 | rhs]
    T = np.zeros((m, 2 * m + 2))
    T[:, :m] = np.eye(m)
    T[:, m:2 * m] = -F
    T[:, 2 * m] = -1.0
    T[:, 2 * m + 1] = q
    basis = list(range(m))
    z0_col = 2 * m

    # artificial variable enters; the row owning min(q) leaves
    row = int(np.argmin(q))
    _pivot(T, row, z0_col)
    leaving = basis[row]
    basis[row] = z0_col
    entering = leaving + m  # complement of the w that just left

    for _ in range(max_pivots):
        col = T[:, entering]
        rhs = T[:, 2 * m + 1]
        pos = col > _PIVOT_TOL
        if not pos.any():
            lam, y = _extract(T, basis, m, F, q)
            return LcpSolution(lam, y, complementarity_residual(lam, y), LcpStatus.RAY_TERMINATION)
        ratios = np.full(m, np.inf)
        ratios[pos] = rhs[pos] / col[pos]
        best = np.min(ratios)
        tied = np.flatnonzero(ratios <= best + _RATIO_TOL * (1.0 + abs(best)))
        row = int(tied[0])
        for i in tied:
            if basis[i] == z0_col:
                row = int(i)  # pull the artificial variable out when possible
                break
        _pivot(T, row, entering)
        leaving = basis[row]
        basis[row] = entering
        if leaving == z0_col:
            lam, y = _extract(T, basis, m, F, q)
            return LcpSolution(lam, y, complementarity_residual(lam, y), LcpStatus.SOLVED)
        entering = leaving + m if leaving < m else leaving - m

    lam, y = _extract(T, basis, m, F, q)
    return LcpSolution(lam, y, complementarity_residual(lam, y), LcpStatus.MAX_ITERATIONS)


def _pivot(T: np.ndarray, row: int, col: int) -> None:
    T[row] = T[row] / T[row, col]
    piv = T[:, col].copy()
    piv[row] = 0.0
    T -= np.outer(piv, T[row])


def _extract(T: np.ndarray, basis: list[int], m: int, F: np.ndarray, q: np.ndarray):
    lam = np.zeros(m)
    rhs = T[:, 2 * m + 1]
    for i, b in enumerate(basis):
        if m <= b < 2 * m:
            lam[b - m] = max(rhs[i], 0.0)
    y = F @ lam + q
    return lam, y


# ---------------------------------------------------------------------------
# Bound-constrained convex QP: min 0.5 z'Hz + g'z  s.t. z >= lower (coordinatewise)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConvexQp:
    """min 0.5 z'Hz + g'z with per-coordinate lower bounds (0 or -inf)."""

    H: np.ndarray
    g: np.ndarray
    lower: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        H = np.asarray(self.H, dtype=float)
        g = np.asarray(self.g, dtype=float).reshape(-1)
        n = g.shape[0]
        if H.shape != (n, n):
            raise ValueError(f"H shape {H.shape} does not match g length {n}")
        lower = self.lower
        if lower is None:
            lower = np.zeros(n)
        lower = np.asarray(lower, dtype=float).reshape(-1)
        if lower.shape[0] != n:
            raise ValueError("lower bound length mismatch")
        asym = np.max(np.abs(H - H.T)) if n else 0.0
        if asym > 1e-9:
            raise ValueError(f"H must be symmetric (max asymmetry {asym:.3e})")
        object.__setattr__(self, "H", 0.5 * (H + H.T))
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "lower", lower)

    @property
    def n(self) -> int:
        return self.g.shape[0]


@dataclass
class QpResult:
    z: np.ndarray
    converged: bool
    iterations: int
    kkt_residual: float

    def objective(self, qp: ConvexQp) -> float:
        return float(0.5 * self.z @ (qp.H @ self.z) + qp.g @ self.z)


def kkt_residual(qp: ConvexQp, z: np.ndarray) -> float:
    """Inf-norm stationarity/feasibility residual for the bound-constrained QP."""
    grad = qp.H @ z + qp.g
    finite = np.isfinite(qp.lower)
    at_bound = finite & (z <= qp.lower + 1e-12)
    r = np.where(at_bound, np.minimum(grad, 0.0), grad)
    bound_viol = np.where(finite, np.maximum(qp.lower - z, 0.0), 0.0)
    if r.size == 0:
        return 0.0
    return float(max(np.max(np.abs(r)), np.max(bound_viol)))


def solve_convex_qp(
    qp: ConvexQp,
    tol: float = 1e-8,
    x0: np.ndarray | None = None,
    max_iterations: int = 10000,
) -> QpResult:
    """Accelerated projected gradient with restarts and an active-set polish.

    The polish solves the KKT system of the current active-set guess exactly
    and is attempted periodically; when its solution verifies the KKT
    conditions the iterate is returned early.  If the iteration cap is hit
    the best iterate is returned with converged=False.
    """
    n = qp.n
    if n == 0:
        return QpResult(np.zeros(0), True, 0, 0.0)
    evals = np.linalg.eigvalsh(qp.H)
    if evals[0] < -1e-9 * max(1.0, evals[-1]):
        raise ValueError(f"H is indefinite (min eigenvalue {evals[0]:.3e})")
    L = max(float(evals[-1]), 1e-30)

    lower = qp.lower
    z = np.maximum(x0 if x0 is not None else np.zeros(n), lower)
    yv = z.copy()
    t = 1.0
    best = z
    best_res = kkt_residual(qp, z)
    if best_res <= tol:
        return QpResult(z, True, 0, best_res)

    for it in range(1, max_iterations + 1):
        grad_y = qp.H @ yv + qp.g
        z_new = np.maximum(yv - grad_y / L, lower)
        if it % 25 == 0 or it == 5:
            polished = _active_set_polish(qp, z_new)
            if polished is not None:
                res = kkt_residual(qp, polished)
                if res <= tol:
                    return QpResult(polished, True, it, res)
        # gradient-based adaptive restart
        if grad_y @ (z_new - z) > 0.0:
            t = 1.0
            yv = z_new.copy()
        else:
            t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
            yv = z_new + ((t - 1.0) / t_new) * (z_new - z)
            t = t_new
        z = z_new
        res = kkt_residual(qp, z)
        if res < best_res:
            best, best_res = z, res
        if res <= tol:
            return QpResult(z, True, it, res)

    polished = _active_set_polish(qp, best)
    if polished is not None:
        res = kkt_residual(qp, polished)
        if res <= max(tol, best_res):
            return QpResult(polished, res <= tol, max_iterations, res)
    return QpResult(best, False, max_iterations, best_res)


def _active_set_polish(qp: ConvexQp, z: np.ndarray) -> np.ndarray | None:
    """Exact KKT solve on the active set guessed from z, with bounded refinement."""
    n = qp.n
    finite = np.isfinite(qp.lower)
    lb = np.where(finite, qp.lower, 0.0)
    active = finite & (z <= lb + 1e-8 * (1.0 + np.abs(lb)))
    for _ in range(2 * n + 4):
        free = ~active
        x = np.where(finite, qp.lower, 0.0).copy()
        if free.any():
            Hff = qp.H[np.ix_(free, free)]
            rhs = -(qp.g[free] + qp.H[np.ix_(free, active)] @ x[active])
            try:
                x[free] = np.linalg.solve(Hff, rhs)
            except np.linalg.LinAlgError:
                return None
        grad = qp.H @ x + qp.g
        below = free & finite & (x < qp.lower - 1e-12)
        if below.any():
            worst = np.flatnonzero(below)[np.argmax((qp.lower - x)[below])]
            active[worst] = True
            continue
        neg = active & (grad < -1e-12 * (1.0 + np.abs(grad).max()))
        if neg.any():
            worst = np.flatnonzero(neg)[np.argmin(grad[neg])]
            active[worst] = False
            continue
        return x
    return None


def solve_lcp_qp(p: Lcp, tol: float = 1e-10) -> LcpSolution:
    """LCP route for symmetric positive (semi)definite F via its KKT-equivalent QP.

    Solves min 0.5 lam'F lam + q'lam s.t. lam >= 0; the KKT conditions of that
    program are exactly LCP(q, F).  Rejects non-symmetric or indefinite F.
    """
    asym = np.max(np.abs(p.F - p.F.T)) if p.m else 0.0
    if asym > 1e-9:
        raise ValueError(f"QP route requires symmetric F (max asymmetry {asym:.3e})")
    sym = 0.5 * (p.F + p.F.T)
    if p.m and np.linalg.eigvalsh(sym)[0] < -1e-9:
        raise ValueError("QP route requires positive semidefinite F")
    res = solve_convex_qp(ConvexQp(sym, p.q, np.zeros(p.m)), tol=tol)
    lam = res.z
    y = p.F @ lam + p.q
    comp = complementarity_residual(lam, y)
    status = LcpStatus.SOLVED if res.converged else LcpStatus.MAX_ITERATIONS
    return LcpSolution(lam, y, comp, status)


def brute_force_lcp(p: Lcp, feas_tol: float = 1e-10) -> list[LcpSolution]:
    """Enumerate all 2^m active sets; oracle for small m only.

    For each subset S the linear system F[S,S] lam_S = -q[S] is solved with
    lam = 0 off S; singular subsystems are skipped.  Every candidate passing
    lam >= -feas_tol and y >= -feas_tol is returned.
    """
    m = p.m
    if m > 16:
        raise ValueError("brute force enumeration limited to m <= 16")
    sols: list[LcpSolution] = []
    for mask in range(1 << m):
        idx = [i for i in range(m) if mask >> i & 1]
        lam = np.zeros(m)
        if idx:
            sub = p.F[np.ix_(idx, idx)]
            try:
                lam[idx] = np.linalg.solve(sub, -p.q[idx])
            except np.linalg.LinAlgError:
                continue
        y = p.F @ lam + p.q
        if np.min(lam, initial=0.0) >= -feas_tol and np.min(y, initial=0.0) >= -feas_tol:
            sols.append(LcpSolution(lam, y, complementarity_residual(lam, y), LcpStatus.SOLVED))
    return sols
