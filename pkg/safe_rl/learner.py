"""
Q-learning on the MPC parameters.

Each update freezes the TD target at the current parameters, minimizes the
squared TD error over the selected parameters subject to the positivity floor
and the sample-based SDC rows, and moves a fraction alpha toward the minimizer
while the MPC stays feasible.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from .datastore import SdcConstraints, Transition
from .errors import NoDescent, SafeRLError, WeakActivation
from .mpc import (POSITIVITY_FLOOR, SLACK_TOL, MpcParams, PolicyEval, Reference, ThetaSelection,
                  eval_q, eval_v_policy, lagrangian_gradient, make_profile, stage_cost)
from .solver import QpProblem, objective_sensitivity, solve
from .tightening import TighteningProfile

logger = logging.getLogger(__name__)

ARMIJO = 1e-4
MAX_BACKTRACKS = 30
MAX_ITERATIONS = 200
PG_TOL = 1e-6
GUARD_HALVINGS = 5


@dataclass(frozen=True)
class UpdateProblem:
    """One constrained update: TD target frozen at the pre-update parameters."""
    transition: Transition
    reference: Reference
    target: float
    sdc: SdcConstraints
    floor: float = POSITIVITY_FLOOR


@dataclass(frozen=True)
class ProjectedResult:
    theta: np.ndarray
    psi: float
    psi_start: float
    pg_norm: float
    iterations: int


@dataclass(frozen=True)
class GuardResult:
    params: MpcParams
    profile: Optional[TighteningProfile]
    alpha_effective: float
    accepted: bool


@dataclass(frozen=True)
class UpdateReport:
    """Per-step learning record."""
    t: int
    psi: float
    psi_star: float
    pg_norm: float
    alpha_effective: float
    sdc_rows: int
    min_eig_H: float
    min_eig_P: float
    accepted: bool
    reason: str
    iterations: int = 0

    def to_row(self) -> dict:
        return {
            "t": self.t, "psi": self.psi, "psi_star": self.psi_star, "pg_norm": self.pg_norm,
            "alpha_effective": self.alpha_effective, "sdc_rows": self.sdc_rows,
            "min_eig_H": self.min_eig_H, "min_eig_P": self.min_eig_P,
            "accepted": self.accepted, "reason": self.reason, "iterations": self.iterations,
        }


def _tril_diagonal(n: int) -> np.ndarray:
    rows, cols = np.tril_indices(n)
    return np.flatnonzero(rows == cols)


def _project_facet(z0: np.ndarray, rows: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Euclidean projection of z0 onto {z | rows z <= rhs}."""
    if np.all(rows @ z0 - rhs <= 0.0):
        return z0
    qp = QpProblem(np.eye(z0.shape[0]), -z0, A_in=rows, b_in=rhs)
    return solve(qp).y_star


def project_theta(theta: np.ndarray, selection: ThetaSelection, params: MpcParams,
                  sdc: Optional[SdcConstraints], floor: float = POSITIVITY_FLOOR) -> np.ndarray:
    """Project onto the Cholesky diagonal floor and the SDC rows."""
    theta = np.array(theta, dtype=float)
    slices = selection.slices(params)
    for name, n in (("H", params.n_s + params.n_a), ("P", params.n_s)):
        if name in slices:
            block = theta[slices[name]]
            diag = _tril_diagonal(n)
            block[diag] = np.maximum(block[diag], floor)
            theta[slices[name]] = block
    if sdc is None or sdc.n_vertices == 0 or not ({"M", "m"} & set(slices)):
        return theta

    n_f, n_w = params.W.n_facets, params.W.dim
    M = theta[slices["M"]].reshape(n_f, n_w) if "M" in slices else params.W.M.copy()
    m = theta[slices["m"]].copy() if "m" in slices else params.W.m.copy()
    V = sdc.vertices
    for i in range(n_f):
        if "M" in slices and "m" in slices:
            z = _project_facet(np.append(M[i], m[i]), sdc.facet_rows(), np.zeros(sdc.n_vertices))
            M[i], m[i] = z[:n_w], z[n_w]
            m[i] = max(m[i], float(np.max(V @ M[i])))
        elif "m" in slices:
            m[i] = max(m[i], float(np.max(V @ M[i])))
        else:
            M[i] = _project_facet(M[i], V, np.full(sdc.n_vertices, m[i]))
    if "M" in slices:
        theta[slices["M"]] = M.ravel()
    if "m" in slices:
        theta[slices["m"]] = m
    return theta


def _initial_step(psi: float, grad: np.ndarray) -> float:
    sq = float(grad @ grad)
    if psi > 0.0 and sq > 0.0:
        return 2.0 * psi / sq
    return 1.0 / max(1.0, float(np.sqrt(sq)))


def minimize_projected(fun: Callable[[np.ndarray], Tuple[float, np.ndarray]],
                       value: Callable[[np.ndarray], float],
                       theta0: np.ndarray,
                       project: Callable[[np.ndarray], np.ndarray],
                       max_iterations: int = MAX_ITERATIONS,
                       tol: float = PG_TOL,
                       armijo: float = ARMIJO,
                       max_backtracks: int = MAX_BACKTRACKS) -> ProjectedResult:
    """Projected gradient descent with Armijo backtracking.

    Every line search starts from the Gauss-Newton length 2 psi / |grad|^2 of a
    squared residual psi = r^2, which reaches r = 0 in one step when r is
    linear in theta.

    Args:
        fun: theta -> (value, gradient)
        value: theta -> value, +inf where undefined
        theta0: Start point (projected first)
        project: Projection onto the feasible set

    Returns:
        ProjectedResult

    Raises:
        NoDescent: if the line search fails at the first iteration
    """
    theta = project(np.asarray(theta0, dtype=float))
    psi, grad = fun(theta)
    psi_start = psi
    pg_norm = float(np.linalg.norm(theta - project(theta - grad)))
    iterations = 0
    while iterations < max_iterations and pg_norm > tol:
        t = _initial_step(psi, grad)
        accepted = None
        for _ in range(max_backtracks):
            candidate = project(theta - t * grad)
            psi_c = value(candidate)
            if np.isfinite(psi_c) and psi_c <= psi + armijo * float(grad @ (candidate - theta)):
                accepted = candidate
                break
            t *= 0.5
        if accepted is None:
            if iterations == 0:
                raise NoDescent(f"line search exhausted after {max_backtracks} backtracks")
            logger.debug(f"Line search stalled at iteration {iterations}, |pg|={pg_norm:.3e}")
            break
        iterations += 1
        try:
            psi_new, grad_new = fun(accepted)
        except WeakActivation:
            theta, psi = accepted, value(accepted)
            pg_norm = float("nan")
            break
        theta, psi, grad = accepted, psi_new, grad_new
        pg_norm = float(np.linalg.norm(theta - project(theta - grad)))
    return ProjectedResult(theta=theta, psi=float(psi), psi_start=float(psi_start),
                           pg_norm=pg_norm, iterations=iterations)


class TdObjective:
    """psi(theta) = (target - Q_theta(s, a))^2 for one update.

    Evaluations are cached per theta and each Q solve is warm-started from
    the active set of the previous one. With a structure the terminal set
    keeps its k' and kept rows, so line-search trials only recompute offsets.
    """

    def __init__(self, selection: ThetaSelection, params: MpcParams, problem: UpdateProblem,
                 structure: Optional[TighteningProfile] = None):
        self.selection = selection
        self.params = params
        self.problem = problem
        self.structure = structure
        self.evaluations = 0
        self._cache: Dict[bytes, Tuple[MpcParams, PolicyEval]] = {}
        self._warm: Optional[Tuple[int, ...]] = None

    def _evaluate(self, theta: np.ndarray) -> Tuple[MpcParams, PolicyEval]:
        theta = np.asarray(theta, dtype=float)
        key = theta.tobytes()
        if key not in self._cache:
            candidate = self.selection.apply(self.params, theta)
            profile = make_profile(candidate, structure=self.structure)
            tr = self.problem.transition
            ev = eval_q(candidate, profile, tr.s, tr.a, self.problem.reference, warm_start=self._warm)
            self._warm = ev.solve.active_set
            self.evaluations += 1
            self._cache[key] = (candidate, ev)
        return self._cache[key]

    def value(self, theta: np.ndarray) -> float:
        """psi without the gradient; +inf when the pipeline fails."""
        try:
            _, ev = self._evaluate(theta)
        except SafeRLError as e:
            logger.debug(f"psi undefined at candidate: {e}")
            return float("inf")
        return (self.problem.target - ev.Q) ** 2

    def residual(self, theta: np.ndarray) -> Tuple[float, np.ndarray]:
        """psi and its gradient.

        Raises:
            WeakActivation: if the Q solution lacks strict complementarity
        """
        candidate, ev = self._evaluate(theta)
        profile = make_profile(candidate, self.selection.profile_blocks, structure=self.structure)
        grad_q = objective_sensitivity(ev.solve, lambda y, lam, mu: lagrangian_gradient(
            candidate, profile, self.selection, ev.layout, self.problem.reference, y, mu))
        diff = self.problem.target - ev.Q
        return diff * diff, -2.0 * diff * grad_q


def td_residual(theta: np.ndarray, selection: ThetaSelection, params: MpcParams,
                problem: UpdateProblem,
                structure: Optional[TighteningProfile] = None) -> Tuple[float, np.ndarray]:
    """psi = (target - Q_theta(s, a))^2 and its gradient.

    Raises:
        WeakActivation: if the Q solution lacks strict complementarity
    """
    return TdObjective(selection, params, problem, structure).residual(theta)


def td_value(theta: np.ndarray, selection: ThetaSelection, params: MpcParams,
             problem: UpdateProblem, structure: Optional[TighteningProfile] = None) -> float:
    """psi without the gradient; +inf when the pipeline fails."""
    return TdObjective(selection, params, problem, structure).value(theta)


def solve_update(theta_k: np.ndarray, problem: UpdateProblem, selection: ThetaSelection,
                 params: MpcParams, max_iterations: int = MAX_ITERATIONS,
                 tol: float = PG_TOL,
                 structure: Optional[TighteningProfile] = None) -> ProjectedResult:
    """Minimize psi over the selected parameters subject to positivity and SDC rows.

    Args:
        structure: Profile at theta_k whose terminal structure is held fixed
            during the search; the full pipeline runs per trial when omitted
    """
    objective = TdObjective(selection, params, problem, structure)
    result = minimize_projected(
        fun=objective.residual,
        value=objective.value,
        theta0=theta_k,
        project=lambda th: project_theta(th, selection, params, problem.sdc, problem.floor),
        max_iterations=max_iterations,
        tol=tol,
    )
    logger.debug(f"TD search: {result.iterations} iterations, {objective.evaluations} Q solves")
    return result


def step(theta_k: np.ndarray, theta_star: np.ndarray, alpha: float,
         selection: Optional[ThetaSelection] = None, params: Optional[MpcParams] = None,
         sdc: Optional[SdcConstraints] = None, floor: float = POSITIVITY_FLOOR) -> np.ndarray:
    """theta_k + alpha (theta_star - theta_k), re-floored and SDC-checked."""
    theta = np.asarray(theta_k, dtype=float) + alpha * (np.asarray(theta_star, dtype=float) - theta_k)
    if selection is None or params is None:
        return theta
    candidate = selection.apply(params, theta)
    if sdc is not None and not sdc.satisfied(candidate.W):
        logger.warning("Averaged parameters violate the SDC rows, projecting")
    return project_theta(theta, selection, params, sdc, floor)


def on_update_feasibility_guard(theta_k: np.ndarray, theta_star: np.ndarray, alpha: float,
                                selection: ThetaSelection, params: MpcParams,
                                problem: UpdateProblem, s_next: np.ndarray,
                                reference_next: Reference, slack_before: float,
                                halvings: int = GUARD_HALVINGS) -> GuardResult:
    """Accept the largest alpha * 2^-i (i <= halvings) keeping the MPC feasible.

    A step is rejected when the tightening pipeline fails (empty terminal set,
    unstable closed loop, solver failure) or when the MPC at the next state
    needs slack while the current parameters did not.
    """
    for i in range(halvings + 1):
        alpha_i = alpha * 0.5 ** i
        theta = step(theta_k, theta_star, alpha_i, selection, params, problem.sdc, problem.floor)
        # candidate must rebuild its full profile and solve the MPC at s+
        candidate = selection.apply(params, theta)
        try:
            profile = make_profile(candidate, selection.profile_blocks)
            ev = eval_v_policy(candidate, profile, s_next, reference_next)
        except SafeRLError as e:
            logger.warning(f"Update with alpha={alpha_i:.4g} rejected: {type(e).__name__}: {e}")
            continue
        # slack that the current parameters did not need
        if ev.slack_total > SLACK_TOL and slack_before <= SLACK_TOL:
            logger.warning(f"Update with alpha={alpha_i:.4g} rejected: slack {ev.slack_total:.3e} at next state")
            continue
        return GuardResult(params=candidate, profile=profile, alpha_effective=alpha_i, accepted=True)
    logger.warning(f"Update rejected after {halvings} halvings, keeping current parameters")
    return GuardResult(params=params, profile=None, alpha_effective=0.0, accepted=False)


def _min_eig(S: np.ndarray) -> float:
    return float(np.min(np.linalg.eigvalsh(0.5 * (S + S.T))))


class QLearner:
    """Owns the learnable parameters and performs one Q-learning update per transition."""

    def __init__(self, selection: ThetaSelection, reward_H: np.ndarray, alpha: float = 0.1,
                 floor: float = POSITIVITY_FLOOR, max_iterations: int = MAX_ITERATIONS,
                 tol: float = PG_TOL, guard_halvings: int = GUARD_HALVINGS):
        if not 0.0 <= alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
        self.selection = selection
        self.reward_H = np.asarray(reward_H, dtype=float)
        self.alpha = alpha
        self.floor = floor
        self.max_iterations = max_iterations
        self.tol = tol
        self.guard_halvings = guard_halvings

    def reward(self, tr: Transition, reference: Reference) -> float:
        return stage_cost(self.reward_H, tr.s, tr.a, reference)

    def td_target(self, params: MpcParams, profile: TighteningProfile, tr: Transition,
                  reference: Reference, reference_next: Reference) -> Tuple[float, PolicyEval]:
        """Frozen target r(s, a) + gamma V(s+) and the MPC solution at s+.

        Raises:
            SafeRLError: if V(s+) cannot be evaluated
        """
        v_next = eval_v_policy(params, profile, tr.s_plus, reference_next)
        if params.gamma == 0.0:
            return self.reward(tr, reference), v_next
        return self.reward(tr, reference) + params.gamma * v_next.V, v_next

    def _report(self, t, params, sdc, psi=float("nan"), psi_star=float("nan"),
                pg_norm=float("nan"), alpha_effective=0.0, accepted=False,
                reason="", iterations=0) -> UpdateReport:
        return UpdateReport(
            t=t, psi=psi, psi_star=psi_star, pg_norm=pg_norm, alpha_effective=alpha_effective,
            sdc_rows=sdc.n_rows(params.W.n_facets) if sdc is not None else 0,
            min_eig_H=_min_eig(params.H), min_eig_P=_min_eig(params.P),
            accepted=accepted, reason=reason, iterations=iterations,
        )

    def update(self, params: MpcParams, profile: TighteningProfile, tr: Transition,
               reference: Reference, reference_next: Reference,
               sdc: SdcConstraints) -> Tuple[MpcParams, TighteningProfile, UpdateReport]:
        """One constrained Q-learning update from a transition.

        Returns:
            Tuple of (params, profile, report); params and profile are unchanged
            when the update is skipped or rejected
        """
        if self.alpha == 0.0 or not self.selection.blocks:
            return params, profile, self._report(tr.t, params, sdc, reason="disabled")

        # TD target frozen at the current parameters
        try:
            target, v_next = self.td_target(params, profile, tr, reference, reference_next)
        except SafeRLError as e:
            logger.warning(f"t={tr.t}: TD target unavailable ({type(e).__name__}), sample skipped")
            return params, profile, self._report(tr.t, params, sdc, reason="target failed")
        problem = UpdateProblem(transition=tr, reference=reference, target=target,
                                sdc=sdc, floor=self.floor)

        # constrained TD minimization on a fixed terminal structure
        theta_k = self.selection.vector(params)
        try:
            result = solve_update(theta_k, problem, self.selection, params,
                                  self.max_iterations, self.tol, structure=profile)
        except WeakActivation as e:
            logger.warning(f"t={tr.t}: weak activation, sample skipped ({e})")
            return params, profile, self._report(tr.t, params, sdc, reason="weak activation")
        except NoDescent as e:
            logger.info(f"t={tr.t}: {e}, keeping parameters")
            return params, profile, self._report(tr.t, params, sdc, reason="no descent")
        except SafeRLError as e:
            logger.warning(f"t={tr.t}: update failed ({type(e).__name__}: {e}), keeping parameters")
            return params, profile, self._report(tr.t, params, sdc, reason="update failed")

        # psi must not increase
        if result.psi > result.psi_start:
            logger.error(f"t={tr.t}: update increased psi ({result.psi_start:.6g} -> {result.psi:.6g})")
            return params, profile, self._report(tr.t, params, sdc, psi=result.psi_start,
                                                 psi_star=result.psi, reason="ascent")

        # averaged step, halved until the MPC stays feasible
        guard = on_update_feasibility_guard(
            theta_k, result.theta, self.alpha, self.selection, params, problem,
            tr.s_plus, reference_next, v_next.slack_total, self.guard_halvings)
        new_params = guard.params
        new_profile = guard.profile if guard.accepted else profile
        logger.debug(f"t={tr.t}: psi {result.psi_start:.4e} -> {result.psi:.4e} "
                     f"in {result.iterations} iterations, alpha_eff={guard.alpha_effective:.4g}")
        return new_params, new_profile, self._report(
            tr.t, new_params, sdc, psi=result.psi_start, psi_star=result.psi,
            pg_norm=result.pg_norm, alpha_effective=guard.alpha_effective,
            accepted=guard.accepted, reason="accepted" if guard.accepted else "infeasible",
            iterations=result.iterations)
