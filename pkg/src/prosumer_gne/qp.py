"""
Small dense convex QP solver used for every agent subproblem.

Problems have the form

    minimize    1/2 x^T (diag(q_diag) + q_mat) x + lin^T x
    subject to  a_ineq x <= b_ineq

and are solved with a Mehrotra predictor-corrector interior point method.
Problems with identical shapes can be stacked and solved together, which is
how the N agent updates of one market iteration are executed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import linprog

logger = logging.getLogger(__name__)

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
MAX_ITER = "max_iter"

# vanishing Tikhonov term, breaks ties in degenerate problems
TIKHONOV = 1e-12
# interior point steps taken past the tolerance before polishing
EXTRA_STEPS = 5


class QpError(RuntimeError):
    """Raised when a subproblem that must be solvable is not."""


@dataclass(frozen=True)
class QpProblem:
    """Convex quadratic program with affine inequality constraints.

    Parameters
    ----------
    q_diag : ndarray, shape (n,)
        Nonnegative diagonal quadratic weights.
    lin : ndarray, shape (n,)
        Linear term.
    a_ineq : ndarray, shape (m, n)
        Constraint matrix.
    b_ineq : ndarray, shape (m,)
        Constraint bounds.
    q_mat : ndarray, shape (n, n), optional
        Dense positive semidefinite quadratic term added to ``diag(q_diag)``.
    """

    q_diag: np.ndarray
    lin: np.ndarray
    a_ineq: np.ndarray
    b_ineq: np.ndarray
    q_mat: np.ndarray | None = None

    def __post_init__(self):
        q_diag = np.asarray(self.q_diag, dtype=float)
        lin = np.asarray(self.lin, dtype=float)
        n = lin.shape[0]
        a = np.asarray(self.a_ineq, dtype=float).reshape(-1, n)
        b = np.asarray(self.b_ineq, dtype=float).reshape(-1)
        if q_diag.shape != (n,):
            raise ValueError("q_diag and lin must have the same length")
        if np.any(q_diag < 0):
            raise ValueError("q_diag must be nonnegative")
        if a.shape[0] != b.shape[0]:
            raise ValueError("a_ineq rows and b_ineq length differ")
        object.__setattr__(self, "q_diag", q_diag)
        object.__setattr__(self, "lin", lin)
        object.__setattr__(self, "a_ineq", a)
        object.__setattr__(self, "b_ineq", b)
        if self.q_mat is not None:
            q_mat = np.asarray(self.q_mat, dtype=float)
            if q_mat.shape != (n, n):
                raise ValueError("q_mat must be n x n")
            object.__setattr__(self, "q_mat", q_mat)

    @property
    def n(self) -> int:
        return self.lin.shape[0]

    @property
    def m(self) -> int:
        return self.b_ineq.shape[0]

    def hessian(self) -> np.ndarray:
        q = np.diag(self.q_diag)
        if self.q_mat is not None:
            q = q + self.q_mat
        return q

    def objective(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ self.hessian() @ x + self.lin @ x)


@dataclass(frozen=True)
class QpSolution:
    x_opt: np.ndarray
    obj: float
    dual: np.ndarray
    status: str
    iterations: int = 0


def project_nonneg(v) -> np.ndarray:
    """Element-wise projection onto the nonnegative orthant."""
    return np.maximum(np.asarray(v, dtype=float), 0.0)


def qp_kkt_residual(problem: QpProblem, x, dual) -> dict:
    """Optimality certificate of a QP solution, computed from scratch.

    Returns the infinity norms of the stationarity, primal infeasibility,
    dual sign and complementarity residuals.
    """
    x = np.asarray(x, dtype=float)
    dual = np.asarray(dual, dtype=float)
    a, b = problem.a_ineq, problem.b_ineq
    grad = problem.hessian() @ x + problem.lin + a.T @ dual
    slack = b - a @ x
    return {
        "stationarity": float(np.max(np.abs(grad), initial=0.0)),
        "primal": float(np.max(np.maximum(-slack, 0.0), initial=0.0)),
        "dual_sign": float(np.max(np.maximum(-dual, 0.0), initial=0.0)),
        "complementarity": float(np.max(np.abs(dual * slack), initial=0.0)),
    }


def _max_step(v, dv):
    """Largest step in [0, 1] keeping ``v + t dv >= 0`` (row-wise)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(dv < 0, -v / dv, np.inf)
    return np.minimum(1.0, ratio.min(axis=-1))


def _solve(k, rhs):
    # relative shift keeps the normal matrix invertible near degenerate optima
    d = np.max(np.abs(np.diagonal(k, axis1=-2, axis2=-1)), axis=-1)
    k = k + (1e-15 * d)[:, None, None] * np.eye(k.shape[-1])
    try:
        return np.linalg.solve(k, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError:
        return np.stack([np.linalg.lstsq(kk, r, rcond=None)[0] for kk, r in zip(k, rhs)])


def _ipm(q, c, g, h, tol, max_iter):
    """Batched Mehrotra predictor-corrector on ``min 1/2 x'qx + c'x, gx <= h``.

    Shapes: q (B, n, n), c (B, n), g (B, m, n), h (B, m).
    """
    bsz, n = c.shape
    m = h.shape[1]
    gt = np.swapaxes(g, 1, 2)
    eye = np.eye(n) * TIKHONOV
    q = q + eye

    if m == 0:
        x = -_solve(q, c)
        return x, np.zeros((bsz, 0)), np.ones(bsz, dtype=bool), 1

    # least-squares style start, then push slacks and duals inside the cone
    x = _solve(q + gt @ g + np.eye(n), (gt @ h[..., None])[..., 0] - c)
    s = h - (g @ x[..., None])[..., 0]
    s = np.maximum(s, 1.0)
    z = np.ones((bsz, m))

    scale_c = 1.0 + np.max(np.abs(c), axis=1)
    scale_h = 1.0 + np.max(np.abs(h), axis=1)
    done = np.zeros(bsz, dtype=bool)
    stalled = np.zeros(bsz, dtype=bool)
    done_at = np.zeros(bsz, dtype=int)
    it = 0
    for it in range(1, max_iter + 1):
        rd = (q @ x[..., None])[..., 0] + c + (gt @ z[..., None])[..., 0]
        rp = (g @ x[..., None])[..., 0] + s - h
        mu = (s * z).sum(axis=1) / m
        worst = np.maximum(np.max(np.abs(rd), axis=1) / scale_c, np.max(np.abs(rp), axis=1) / scale_h)
        # every product, not just the average, so the duality gap is small too
        worst = np.maximum(worst, np.max(s * z, axis=1) / np.maximum(scale_c, scale_h))
        done_at = np.where(~done & (worst <= tol), it, done_at)
        done |= worst <= tol
        # a few more steps past tol so small multipliers separate from small
        # slacks for the polishing step; a stall from here on is harmless
        act = (worst > tol * 1e-3) & ~stalled & (~done | (it - done_at < EXTRA_STEPS))
        if not act.any():
            break
        with np.errstate(all="ignore"):
            w = z / s
            kmat = q + gt @ (w[..., None] * g)

            # predictor
            rc = s * z
            rhs = -rd - (gt @ (w * rp - rc / s)[..., None])[..., 0]
            dx = _solve(kmat, rhs)
            gdx = (g @ dx[..., None])[..., 0]
            dz = w * (gdx + rp) - rc / s
            ds = -rp - gdx
            a_aff = np.minimum(_max_step(s, ds), _max_step(z, dz))
            mu_aff = ((s + a_aff[:, None] * ds) * (z + a_aff[:, None] * dz)).sum(axis=1) / m
            sigma = np.clip(mu_aff / np.maximum(mu, 1e-300), 0.0, 1.0) ** 3

            # corrector
            rc = s * z + ds * dz - (sigma * mu)[:, None]
            rhs = -rd - (gt @ (w * rp - rc / s)[..., None])[..., 0]
            dx = _solve(kmat, rhs)
            gdx = (g @ dx[..., None])[..., 0]
            dz = w * (gdx + rp) - rc / s
            ds = -rp - gdx
            step = 0.99 * np.minimum(_max_step(s, ds), _max_step(z, dz))
            x_new = x + step[:, None] * dx
            s_new = np.maximum(s + step[:, None] * ds, 1e-150)
            z_new = np.maximum(z + step[:, None] * dz, 1e-150)
        finite = (np.isfinite(x_new).all(axis=1) & np.isfinite(s_new).all(axis=1)
                  & np.isfinite(z_new).all(axis=1) & (z_new.max(axis=1) < 1e100))
        stalled |= act & ~finite
        upd = (act & finite)[:, None]
        x = np.where(upd, x_new, x)
        s = np.where(upd, s_new, s)
        z = np.where(upd, z_new, z)
    return x, z, done, it


def _scale(problem: QpProblem) -> float:
    return 1.0 + np.max(np.abs(problem.lin), initial=0.0) + np.max(np.abs(problem.b_ineq), initial=0.0)


def _kkt_solve(kkt, rhs, n, atol):
    """Solve a saddle-point system, tolerating linearly dependent constraint rows.

    Dependent rows make ``kkt`` singular; a small negative diagonal in the
    constraint block makes it quasi-definite, and two refinement sweeps
    against the exact matrix recover the accuracy lost to the shift.
    """
    try:
        sol = np.linalg.solve(kkt, rhs)
        if np.allclose(kkt @ sol, rhs, rtol=0.0, atol=atol):
            return sol
    except np.linalg.LinAlgError:
        pass
    reg = kkt.copy()
    idx = np.arange(n, kkt.shape[0])
    reg[idx, idx] -= 1e-10 * (1.0 + np.max(np.abs(kkt)))
    try:
        sol = np.linalg.solve(reg, rhs)
        for _ in range(2):
            sol = sol + np.linalg.solve(reg, rhs - kkt @ sol)
    except np.linalg.LinAlgError:
        sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
    return sol


def _active_set_solve(problem: QpProblem, act, tol, rounds: int = 5):
    """Solve the KKT system with the rows ``act`` held as equalities, repairing the set.

    Each round drops rows with a negative multiplier and adds violated rows.
    Dependent active rows fall back to a least-squares solve. Returns the
    best ``(x, dual, residual)`` seen, ``residual`` being the largest QP KKT
    residual.
    """
    a, b = problem.a_ineq, problem.b_ineq
    n = problem.n
    q = problem.hessian() + TIKHONOV * np.eye(n)
    scale = _scale(problem)
    best = (None, None, np.inf)
    act = np.asarray(act, dtype=bool).copy()
    for _ in range(rounds):
        rows = np.flatnonzero(act)
        kkt = np.zeros((n + rows.size, n + rows.size))
        kkt[:n, :n] = q
        kkt[:n, n:] = a[rows].T
        kkt[n:, :n] = a[rows]
        rhs = np.concatenate([-problem.lin, b[rows]])
        sol = _kkt_solve(kkt, rhs, n, 1e-9 * scale)
        if not np.all(np.isfinite(sol)):
            break
        xp = sol[:n]
        zp = np.zeros(problem.m)
        zp[rows] = sol[n:]
        res = max(qp_kkt_residual(problem, xp, zp).values())
        if res < best[2]:
            best = (xp, np.maximum(zp, 0.0), res)
        if res <= tol * scale * 1e-3:
            break
        violated = a @ xp - b > tol * scale
        negative = np.zeros_like(act)
        negative[rows] = sol[n:] < 0
        nxt = (act & ~negative) | violated
        if np.array_equal(nxt, act):
            break
        act = nxt
    return best


def _polish(problem: QpProblem, x, z, tol):
    """Refine an interior point solution on its guessed active set.

    Returns the polished (x, dual) when it is at least as good a certificate,
    otherwise the inputs unchanged.
    """
    before = max(qp_kkt_residual(problem, x, z).values())
    xp, zp, res = _active_set_solve(problem, z > problem.b_ineq - problem.a_ineq @ x, tol)
    if xp is not None and res <= before:
        return xp, zp
    return x, z


def active_rows(problem: QpProblem, solution: "QpSolution", tol: float = 1e-9) -> np.ndarray:
    """Rows held with equality at a solution, usable as a warm start."""
    slack = problem.b_ineq - problem.a_ineq @ solution.x_opt
    return (solution.dual > 0) | (slack <= tol * _scale(problem))


def _is_feasible(a, b) -> bool:
    if a.shape[0] == 0:
        return True
    res = linprog(np.zeros(a.shape[1]), A_ub=a, b_ub=b,
                  bounds=[(None, None)] * a.shape[1], method="highs")
    return res.status != 2


def solve_qp_batch(problems: Sequence[QpProblem], tol: float = 1e-8,
                   max_iter: int = 100, polish: bool = True, active=None) -> list[QpSolution]:
    """Solve several QPs of identical shape in one vectorised pass.

    Parameters
    ----------
    problems : sequence of QpProblem
        All problems must share ``n`` and ``m``.
    tol : float
        Relative tolerance on the KKT residuals.
    max_iter : int
        Interior point iteration cap.
    polish : bool
        Refine each solution on its identified active set.
    active : sequence of bool arrays, optional
        Guessed active rows per problem (for instance from the previous
        iteration, see :func:`active_rows`). A guess that yields a KKT
        certificate within ``tol`` skips the interior point method.

    Returns
    -------
    list of QpSolution
        One solution per problem, in order. Unconverged problems are checked
        for feasibility and reported as ``infeasible`` or ``max_iter`` with
        the last iterate.
    """
    if not problems:
        return []
    n, m = problems[0].n, problems[0].m
    if any(p.n != n or p.m != m for p in problems):
        raise ValueError("batched problems must share dimensions")
    out: list = [None] * len(problems)
    if active is not None and m:
        for k, (p, act) in enumerate(zip(problems, active)):
            if act is None:
                continue
            xk, zk, res = _active_set_solve(p, act, tol)
            if xk is not None and res <= tol * _scale(p):
                out[k] = QpSolution(x_opt=xk, obj=p.objective(xk), dual=zk, status=OPTIMAL, iterations=0)
    todo = [k for k in range(len(problems)) if out[k] is None]
    if not todo:
        return out
    cold = [problems[k] for k in todo]
    q = np.stack([p.hessian() for p in cold])
    c = np.stack([p.lin for p in cold])
    g = np.stack([p.a_ineq for p in cold])
    h = np.stack([p.b_ineq for p in cold])
    x, z, done, it = _ipm(q, c, g, h, tol, max_iter)

    for j, k in enumerate(todo):
        p = problems[k]
        xk, zk = x[j], z[j]
        if done[j]:
            status = OPTIMAL
            if polish and m:
                xk, zk = _polish(p, xk, zk, tol)
        elif not _is_feasible(p.a_ineq, p.b_ineq):
            status = INFEASIBLE
        else:
            status = MAX_ITER
            logger.debug("QP hit max_iter=%d", max_iter)
        out[k] = QpSolution(x_opt=xk, obj=p.objective(xk), dual=zk, status=status, iterations=it)
    return out


def solve_qp(problem: QpProblem, tol: float = 1e-8, max_iter: int = 100,
             polish: bool = True) -> QpSolution:
    """Solve a single convex QP. See :func:`solve_qp_batch`."""
    return solve_qp_batch([problem], tol=tol, max_iter=max_iter, polish=polish)[0]


# --------------------------------------------------------------------------
# agent subproblems
# --------------------------------------------------------------------------

def local_prox_problem(polytope, references, lin_extra=None, rho: float = 0.1,
                       own_weight: float = 1.0) -> QpProblem:
    """Agent prox step as a QP over the epigraph decision ``[x; y]``.

    Minimises ``own_weight * sum(y) + lin_extra^T [x; y]`` plus
    ``weight/(2 rho) |M x - target|^2`` for every ``(weight, M, target)`` in
    ``references`` (``M`` acts on the battery part ``x``).

    Parameters
    ----------
    polytope : tuple
        ``(a_tilde, b_tilde)`` of the agent, epigraph rows included.
    """
    if rho <= 0:
        raise ValueError("rho must be positive")
    a_tilde, b_tilde = polytope[0], polytope[1]
    n3 = a_tilde.shape[1]
    n2 = 2 * n3 // 3
    q_x = np.zeros((n2, n2))
    lin_x = np.zeros(n2)
    for weight, m_mat, target in references:
        m_mat = np.asarray(m_mat, dtype=float).reshape(-1, n2)
        q_x += weight * m_mat.T @ m_mat
        lin_x -= weight * m_mat.T @ np.asarray(target, dtype=float)
    q_mat = np.zeros((n3, n3))
    q_mat[:n2, :n2] = q_x / rho
    lin = np.concatenate([lin_x / rho, np.full(n3 - n2, float(own_weight))])
    if lin_extra is not None:
        lin = lin + np.asarray(lin_extra, dtype=float)
    return QpProblem(np.zeros(n3), lin, a_tilde, b_tilde, q_mat=q_mat)


def local_pfb_problem(polytope, grad_term, x_prev, rho: float = 0.1) -> QpProblem:
    """``min grad_term^T u + |u - x_prev|^2 / (2 rho)`` over the agent polyhedron."""
    if rho <= 0:
        raise ValueError("rho must be positive")
    x_prev = np.asarray(x_prev, dtype=float)
    lin = np.asarray(grad_term, dtype=float) - x_prev / rho
    return QpProblem(np.full(x_prev.shape[0], 1.0 / rho), lin, polytope[0], polytope[1])


def _agent_solve(problem: QpProblem, tol: float, max_iter: int) -> np.ndarray:
    sol = solve_qp(problem, tol=tol, max_iter=max_iter)
    if sol.status != OPTIMAL:
        raise QpError(f"agent subproblem returned {sol.status}")
    return sol.x_opt


def solve_local_prox(polytope, references, lin_extra=None, rho: float = 0.1, own_weight: float = 1.0,
                     tol: float = 1e-8, max_iter: int = 100) -> np.ndarray:
    """Solve one agent prox step, see :func:`local_prox_problem`."""
    return _agent_solve(local_prox_problem(polytope, references, lin_extra, rho, own_weight), tol, max_iter)


def solve_local_pfb(polytope, grad_term, x_prev, rho: float = 0.1,
                    tol: float = 1e-8, max_iter: int = 100) -> np.ndarray:
    """Solve one projected-gradient step of an agent, see :func:`local_pfb_problem`."""
    return _agent_solve(local_pfb_problem(polytope, grad_term, x_prev, rho), tol, max_iter)
