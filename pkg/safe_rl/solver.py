"""
Dense primal active-set solver for convex QPs and LPs.

Problems have the form

    minimize    1/2 y'Hy + g'y + const
    subject to  A_eq y = b_eq
                A_in y <= b_in

with stationarity written as Hy + g + A_eq' lambda + A_in' mu = 0, mu >= 0.
Besides the solution, the solver exposes the optimal active set, the
multipliers and a factorization of the KKT matrix that can be reused for
parametric sensitivities.
"""

import logging
import warnings
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg as la

from .errors import (
    DimensionMismatch,
    Infeasible,
    MaxIterations,
    SingularKkt,
    Unbounded,
    WeakActivation,
)

logger = logging.getLogger(__name__)

FEAS_TOL = 1e-9
OPT_TOL = 1e-9
SC_TOL = 1e-7
CURVATURE_TOL = 1e-10
RANK_TOL = 1e-10
# consecutive zero-length steps before switching to Bland's rule
BLAND_AFTER = 3


def _as_rows(A, b, n: int, kind: str) -> Tuple[np.ndarray, np.ndarray]:
    if A is None:
        if b is not None and np.size(b) > 0:
            raise DimensionMismatch(f"{kind} right-hand side given without a matrix")
        return np.zeros((0, n)), np.zeros(0)
    A = np.asarray(A, dtype=float)
    if A.size == 0:
        A = A.reshape(0, n)
    A = np.atleast_2d(A)
    b = np.atleast_1d(np.asarray(b, dtype=float)) if b is not None else np.zeros(0)
    if A.shape[1] != n:
        raise DimensionMismatch(f"{kind} matrix has {A.shape[1]} columns, expected {n}")
    if A.shape[0] != b.shape[0]:
        raise DimensionMismatch(f"{kind} matrix has {A.shape[0]} rows but {b.shape[0]} offsets")
    return A, b


@dataclass
class QpProblem:
    """Convex QP (H = 0 gives an LP).

    Attributes:
        H: Symmetric positive semidefinite cost matrix, or None for an LP
        g: Linear cost
        A_eq, b_eq: Equality constraints A_eq y = b_eq
        A_in, b_in: Inequality constraints A_in y <= b_in
        const: Constant cost offset
    """
    H: Optional[np.ndarray]
    g: np.ndarray
    A_eq: Optional[np.ndarray] = None
    b_eq: Optional[np.ndarray] = None
    A_in: Optional[np.ndarray] = None
    b_in: Optional[np.ndarray] = None
    const: float = 0.0

    def __post_init__(self):
        self.g = np.atleast_1d(np.asarray(self.g, dtype=float))
        n = self.g.shape[0]
        if self.H is None:
            self.H = np.zeros((n, n))
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        if self.H.shape != (n, n):
            raise DimensionMismatch(f"H has shape {self.H.shape}, expected {(n, n)}")
        self.A_eq, self.b_eq = _as_rows(self.A_eq, self.b_eq, n, "equality")
        self.A_in, self.b_in = _as_rows(self.A_in, self.b_in, n, "inequality")
        self.const = float(self.const)

    @classmethod
    def lp(cls, c, A_in=None, b_in=None, A_eq=None, b_eq=None) -> "QpProblem":
        """Build the LP min c'y subject to the given constraints."""
        return cls(None, c, A_eq=A_eq, b_eq=b_eq, A_in=A_in, b_in=b_in)

    @property
    def n_vars(self) -> int:
        return self.g.shape[0]

    @property
    def n_eq(self) -> int:
        return self.A_eq.shape[0]

    @property
    def n_in(self) -> int:
        return self.A_in.shape[0]

    def objective(self, y: np.ndarray) -> float:
        return float(0.5 * y @ self.H @ y + self.g @ y + self.const)


@dataclass(frozen=True)
class SolveResult:
    """Primal-dual solution of a QpProblem.

    The KKT matrix rows are ordered as: stationarity (n_vars), kept equality
    rows in ``eq_rows`` order, active inequality rows in ``active_set`` order.
    """
    y_star: np.ndarray
    lambda_eq: np.ndarray
    mu_in: np.ndarray
    active_set: Tuple[int, ...]
    objective: float
    dual_objective: float
    kkt_matrix: np.ndarray
    kkt_factorization: Optional[Tuple[np.ndarray, np.ndarray]]
    eq_rows: Tuple[int, ...]
    iterations: int
    licq: bool
    strict_complementarity: bool


def _row_scale(b: np.ndarray) -> np.ndarray:
    return 1.0 + np.abs(b)


def _is_feasible(qp: QpProblem, y: np.ndarray, tol: float = FEAS_TOL) -> bool:
    if y.shape != (qp.n_vars,) or not np.all(np.isfinite(y)):
        return False
    if qp.n_eq and np.any(np.abs(qp.A_eq @ y - qp.b_eq) > 10 * tol * _row_scale(qp.b_eq)):
        return False
    if qp.n_in and np.any(qp.A_in @ y - qp.b_in > tol * _row_scale(qp.b_in)):
        return False
    return True


def _independent_equalities(qp: QpProblem) -> Tuple[Tuple[int, ...], np.ndarray]:
    """Drop linearly dependent equality rows.

    Returns:
        Tuple of (kept row indices, minimum-norm point satisfying the equalities)

    Raises:
        Infeasible: if the equalities are inconsistent
    """
    n = qp.n_vars
    if qp.n_eq == 0:
        return (), np.zeros(n)
    _, R, piv = la.qr(qp.A_eq.T, pivoting=True, mode='economic')
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > RANK_TOL * max(1.0, diag[0] if diag.size else 0.0)))
    keep = tuple(sorted(int(i) for i in piv[:rank]))
    if rank == 0:
        y0 = np.zeros(n)
    else:
        y0 = np.linalg.lstsq(qp.A_eq[list(keep)], qp.b_eq[list(keep)], rcond=None)[0]
    residual = np.abs(qp.A_eq @ y0 - qp.b_eq)
    if np.any(residual > 10 * FEAS_TOL * _row_scale(qp.b_eq)):
        raise Infeasible(f"inconsistent equality constraints (residual {residual.max():.3e})")
    if rank < qp.n_eq:
        logger.debug(f"Dropped {qp.n_eq - rank} dependent equality rows")
    return keep, y0


def _null_space(A_W: np.ndarray, n: int) -> np.ndarray:
    if A_W.shape[0] == 0:
        return np.eye(n)
    Q, _ = la.qr(A_W.T)
    return Q[:, A_W.shape[0]:]


def _step_direction(H: np.ndarray, grad: np.ndarray, Z: np.ndarray) -> Tuple[np.ndarray, bool]:
    """Newton step in the null space, or a descent ray along zero curvature.

    Returns:
        Tuple of (direction, is_ray)
    """
    n = H.shape[0]
    if Z.shape[1] == 0:
        return np.zeros(n), False
    Hz = Z.T @ H @ Z
    Hz = 0.5 * (Hz + Hz.T)
    gz = Z.T @ grad
    evals, evecs = np.linalg.eigh(Hz)
    flat = evals <= CURVATURE_TOL * max(1.0, float(np.max(np.abs(evals))))
    coeffs = evecs.T @ gz
    if np.any(flat) and np.linalg.norm(coeffs[flat]) > OPT_TOL * max(1.0, np.linalg.norm(grad)):
        return Z @ (-evecs[:, flat] @ coeffs[flat]), True
    curved = ~flat
    pz = -evecs[:, curved] @ (coeffs[curved] / evals[curved])
    return Z @ pz, False


def _working_matrix(eq_A: np.ndarray, A_in: np.ndarray, working: Sequence[int]) -> np.ndarray:
    if len(working) == 0:
        return eq_A
    return np.vstack([eq_A, A_in[list(working)]])


def _active_set_loop(qp: QpProblem,
                     y: np.ndarray,
                     working: List[int],
                     eq_A: np.ndarray,
                     max_iter: int) -> Tuple[np.ndarray, List[int], np.ndarray, int]:
    """Run primal active-set iterations from a feasible point.

    Returns:
        Tuple of (solution, working set, multipliers of [eq rows; working rows], iterations)
    """
    H, g, A_in, b_in = qp.H, qp.g, qp.A_in, qp.b_in
    n = qp.n_vars
    n_eq = eq_A.shape[0]
    row_norms = np.linalg.norm(A_in, axis=1) if qp.n_in else np.zeros(0)
    working = list(working)
    zero_steps = 0

    for iteration in range(1, max_iter + 1):
        # equality-constrained step on the working set
        A_W = _working_matrix(eq_A, A_in, working)
        grad = H @ y + g
        p, is_ray = _step_direction(H, grad, _null_space(A_W, n))
        y_scale = max(1.0, float(np.max(np.abs(y))) if n else 1.0)

        # stationary on the working set: stop or drop a negative multiplier
        if not is_ray and np.max(np.abs(p), initial=0.0) <= 1e-12 * y_scale:
            mult = (np.linalg.lstsq(A_W.T, -grad, rcond=None)[0]
                    if A_W.shape[0] else np.zeros(0))
            mu_w = mult[n_eq:]
            threshold = -OPT_TOL * max(1.0, np.linalg.norm(grad))
            if len(working) == 0 or mu_w.min() >= threshold:
                return y, working, mult, iteration
            if zero_steps >= BLAND_AFTER:
                negative = [k for k in range(len(working)) if mu_w[k] < threshold]
                drop = min(negative, key=lambda k: working[k])
            else:
                drop = int(np.argmin(mu_w))
            logger.debug(f"iter {iteration}: drop constraint {working[drop]} (mu={mu_w[drop]:.3e})")
            working.pop(drop)
            continue

        # ratio test over constraints outside the working set
        step = np.inf if is_ray else 1.0
        block = None
        if qp.n_in:
            Ap = A_in @ p
            moving = Ap > 1e-12 * np.maximum(row_norms, 1.0) * max(1.0, float(np.max(np.abs(p))))
            moving[working] = False
            if np.any(moving):
                idx = np.flatnonzero(moving)
                slack = np.maximum(b_in[idx] - A_in[idx] @ y, 0.0)
                ratios = slack / Ap[idx]
                best = int(np.argmin(ratios))
                if ratios[best] < step:
                    step = float(ratios[best])
                    block = int(idx[best])

        if block is None and is_ray:
            raise Unbounded("objective unbounded along a feasible ray")

        # move, adding the blocking row
        y = y + step * p
        if block is not None:
            working.append(block)
        zero_steps = zero_steps + 1 if step * np.linalg.norm(p) <= 1e-14 * y_scale else 0

    raise MaxIterations(f"active-set loop exceeded {max_iter} iterations")


def _phase_one(qp: QpProblem, eq_A: np.ndarray, eq_b: np.ndarray,
               y0: np.ndarray, max_iter: int) -> np.ndarray:
    """Find a feasible point via min t s.t. A_in y - t <= b_in, t >= 0."""
    n = qp.n_vars
    if qp.n_in == 0:
        return y0
    t0 = max(0.0, float(np.max(qp.A_in @ y0 - qp.b_in)))
    if t0 <= FEAS_TOL * float(np.min(_row_scale(qp.b_in))):
        return y0

    A_aug = np.block([
        [qp.A_in, -np.ones((qp.n_in, 1))],
        [np.zeros((1, n)), -np.ones((1, 1))],
    ])
    b_aug = np.append(qp.b_in, 0.0)
    eq_aug = np.hstack([eq_A, np.zeros((eq_A.shape[0], 1))])
    c = np.zeros(n + 1)
    c[-1] = 1.0
    aux = QpProblem(None, c, A_eq=eq_aug, b_eq=eq_b, A_in=A_aug, b_in=b_aug)
    z, _, _, iterations = _active_set_loop(aux, np.append(y0, t0), [], eq_aug, max_iter)
    if z[-1] > FEAS_TOL * float(np.max(_row_scale(qp.b_in))):
        raise Infeasible(f"no feasible point (max violation {z[-1]:.3e})")
    logger.debug(f"Phase one converged in {iterations} iterations")
    return z[:n]


def _warm_start_point(qp: QpProblem, eq_A: np.ndarray, eq_b: np.ndarray,
                      warm_start: Sequence[int]) -> Optional[Tuple[np.ndarray, List[int]]]:
    """Solve the equality QP on a guessed active set; None if unusable."""
    n = qp.n_vars
    guess = [i for i in sorted(set(int(i) for i in warm_start)) if 0 <= i < qp.n_in]
    full = _working_matrix(eq_A, qp.A_in, guess)
    if full.shape[0] <= n and np.linalg.matrix_rank(full) == full.shape[0]:
        chosen: List[int] = guess
    else:
        # keep a linearly independent subset, in index order
        chosen = []
        for i in guess:
            candidate = _working_matrix(eq_A, qp.A_in, chosen + [i])
            if np.linalg.matrix_rank(candidate) == candidate.shape[0]:
                chosen.append(i)
    A_W = _working_matrix(eq_A, qp.A_in, chosen)
    b_W = np.concatenate([eq_b, qp.b_in[chosen]]) if chosen else eq_b
    m = A_W.shape[0]
    kkt = kkt_matrix(qp.H, A_W)
    if np.linalg.cond(kkt) > 1e12:
        return None
    try:
        sol = np.linalg.solve(kkt, np.concatenate([-qp.g, b_W]))
    except np.linalg.LinAlgError:
        return None
    y = sol[:n]
    if not np.all(np.isfinite(y)) or not _is_feasible(qp, y):
        return None
    if m and np.any(np.abs(A_W @ y - b_W) > 10 * FEAS_TOL * _row_scale(b_W)):
        return None
    return y, chosen


def _factorize(kkt: np.ndarray) -> Optional[Tuple[np.ndarray, np.ndarray]]:
    if kkt.size == 0:
        return None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", la.LinAlgWarning)
        lu, piv = la.lu_factor(kkt)
    pivots = np.abs(np.diag(lu))
    if not np.all(np.isfinite(pivots)) or pivots.min() <= 1e-12 * max(1.0, pivots.max()):
        return None
    return lu, piv


def _licq(qp: QpProblem, y: np.ndarray) -> bool:
    primal_active = (np.abs(qp.A_in @ y - qp.b_in) <= 10 * FEAS_TOL * _row_scale(qp.b_in)
                     if qp.n_in else np.zeros(0, dtype=bool))
    rows = np.vstack([qp.A_eq, qp.A_in[primal_active]])
    if rows.shape[0] == 0:
        return True
    return int(np.linalg.matrix_rank(rows)) == rows.shape[0]


def kkt_matrix(H: np.ndarray, A_W: np.ndarray) -> np.ndarray:
    """Assemble [[H, A_W'], [A_W, 0]]."""
    m = A_W.shape[0]
    return np.block([[H, A_W.T], [A_W, np.zeros((m, m))]])


def solve(qp: QpProblem,
          warm_start: Optional[Sequence[int]] = None,
          initial_point: Optional[np.ndarray] = None,
          max_iterations: Optional[int] = None) -> SolveResult:
    """Solve a convex QP/LP with the primal active-set method.

    Args:
        qp: Problem to solve
        warm_start: Guessed optimal active set (inequality row indices)
        initial_point: Feasible starting point; skips phase one when valid
        max_iterations: Iteration cap (default 10 * (n_vars + n_cons))

    Returns:
        SolveResult with multipliers, active set and KKT factorization

    Raises:
        Infeasible, Unbounded, MaxIterations
    """
    n = qp.n_vars
    max_iter = max_iterations or 10 * (n + qp.n_eq + qp.n_in) + 10
    eq_rows, y_eq = _independent_equalities(qp)
    eq_A = qp.A_eq[list(eq_rows)] if eq_rows else np.zeros((0, n))
    eq_b = qp.b_eq[list(eq_rows)] if eq_rows else np.zeros(0)

    # warm active set first; otherwise initial_point or phase one
    start = None
    if warm_start is not None:
        start = _warm_start_point(qp, eq_A, eq_b, warm_start)
        if start is None:
            logger.debug("Warm start rejected, falling back")
    if start is None and initial_point is not None:
        y_init = np.asarray(initial_point, dtype=float).ravel()
        if _is_feasible(qp, y_init):
            start = (y_init, [])
        else:
            logger.debug("Initial point infeasible, running phase one")
    if start is None:
        start = (_phase_one(qp, eq_A, eq_b, y_eq, max_iter), [])

    y, working, mult, iterations = _active_set_loop(qp, start[0], start[1], eq_A, max_iter)
    return _assemble(qp, y, working, mult, eq_rows, eq_A, iterations)


def _assemble(qp: QpProblem, y: np.ndarray, working: List[int], mult: np.ndarray,
              eq_rows: Tuple[int, ...], eq_A: np.ndarray, iterations: int) -> SolveResult:
    n_kept = len(eq_rows)
    lam = np.zeros(qp.n_eq)
    if n_kept:
        lam[list(eq_rows)] = mult[:n_kept]
    mu = np.zeros(qp.n_in)
    if working:
        mu[working] = np.maximum(mult[n_kept:], 0.0)
    active = tuple(sorted(working))

    kkt = kkt_matrix(qp.H, _working_matrix(eq_A, qp.A_in, active))
    dual = float(-0.5 * y @ qp.H @ y - lam @ qp.b_eq - mu @ qp.b_in + qp.const)
    return SolveResult(
        y_star=y,
        lambda_eq=lam,
        mu_in=mu,
        active_set=active,
        objective=qp.objective(y),
        dual_objective=dual,
        kkt_matrix=kkt,
        kkt_factorization=_factorize(kkt),
        eq_rows=eq_rows,
        iterations=iterations,
        licq=_licq(qp, y),
        strict_complementarity=all(mu[i] >= SC_TOL for i in active),
    )


def kkt_residual(qp: QpProblem, res: SolveResult) -> float:
    """Largest violation of stationarity, feasibility, dual sign and complementarity."""
    y = res.y_star
    stationarity = qp.H @ y + qp.g + qp.A_eq.T @ res.lambda_eq + qp.A_in.T @ res.mu_in
    parts = [np.abs(stationarity)]
    if qp.n_eq:
        parts.append(np.abs(qp.A_eq @ y - qp.b_eq))
    if qp.n_in:
        slack = qp.A_in @ y - qp.b_in
        parts.extend([np.maximum(slack, 0.0), np.maximum(-res.mu_in, 0.0), np.abs(res.mu_in * slack)])
    return float(max(np.max(p, initial=0.0) for p in parts))


def objective_sensitivity(res: SolveResult,
                          dL_dtheta: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]) -> np.ndarray:
    """Gradient of the optimal value: the parameter gradient of the Lagrangian.

    Args:
        res: Solution with strict complementarity
        dL_dtheta: Callback (y, lambda_eq, mu_in) -> dL/dtheta at fixed primal-dual point

    Raises:
        WeakActivation: if strict complementarity fails
    """
    if not res.strict_complementarity:
        weak = [i for i in res.active_set if res.mu_in[i] < SC_TOL]
        raise WeakActivation(f"weakly active constraints {weak}")
    return np.atleast_1d(np.asarray(dL_dtheta(res.y_star, res.lambda_eq, res.mu_in), dtype=float))


def parametric_rhs(res: SolveResult, qp: QpProblem,
                   dH=None, dg=None, dA_eq=None, db_eq=None, dA_in=None, db_in=None) -> np.ndarray:
    """One column of dr/dtheta for a scalar parameter, in KKT row order.

    Each argument is the derivative of the corresponding QpProblem field; omitted
    fields do not depend on the parameter.
    """
    n = qp.n_vars
    y = res.y_star
    stat = np.zeros(n)
    if dH is not None:
        stat += np.asarray(dH, dtype=float) @ y
    if dg is not None:
        stat += np.asarray(dg, dtype=float)
    if dA_eq is not None:
        stat += np.asarray(dA_eq, dtype=float).T @ res.lambda_eq
    if dA_in is not None:
        stat += np.asarray(dA_in, dtype=float).T @ res.mu_in

    eq = list(res.eq_rows)
    eq_part = np.zeros(len(eq))
    if dA_eq is not None:
        eq_part += (np.asarray(dA_eq, dtype=float) @ y)[eq]
    if db_eq is not None:
        eq_part -= np.atleast_1d(np.asarray(db_eq, dtype=float))[eq]

    act = list(res.active_set)
    in_part = np.zeros(len(act))
    if dA_in is not None:
        in_part += (np.asarray(dA_in, dtype=float) @ y)[act]
    if db_in is not None:
        in_part -= np.atleast_1d(np.asarray(db_in, dtype=float))[act]
    return np.concatenate([stat, eq_part, in_part])


def solution_sensitivity(res: SolveResult, dr_dtheta: np.ndarray) -> np.ndarray:
    """Sensitivity of the primal-dual solution for the fixed optimal active set.

    Solves K dz/dtheta = -dr/dtheta with the stored factorization.

    Args:
        res: Solution whose KKT matrix was factorized
        dr_dtheta: Matrix (or vector) of residual derivatives in KKT row order

    Returns:
        dz/dtheta over (y, kept lambda_eq, active mu)

    Raises:
        SingularKkt: if the KKT matrix is singular
    """
    if res.kkt_factorization is None:
        raise SingularKkt("KKT matrix of the optimal active set is singular")
    rhs = np.asarray(dr_dtheta, dtype=float)
    if rhs.shape[0] != res.kkt_matrix.shape[0]:
        raise DimensionMismatch(
            f"dr_dtheta has {rhs.shape[0]} rows, KKT system has {res.kkt_matrix.shape[0]}")
    return -la.lu_solve(res.kkt_factorization, rhs)
