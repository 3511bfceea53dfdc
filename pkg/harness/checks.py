"""
Acceptance checks: oracle comparisons and seeded Monte-Carlo properties.

Each registered check takes (config, quick) and returns (passed, message);
`quick` shrinks trial counts and episode lengths.
"""

import itertools
import json
import logging
import math
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import ConvexHull

from safe_rl.datastore import NoiseDatastore, Transition
from safe_rl.errors import Infeasible, SafeRLError, WeakActivation
from safe_rl.learner import UpdateProblem, td_residual, td_value
from safe_rl.mpc import (SLACK_TOL, Reference, build_qp, eval_q, eval_v_policy, make_profile,
                         stage_cost)
from safe_rl.polytope import FacetPolytope, hull_membership, vertices
from safe_rl.solver import solve
from safe_rl.tightening import closed_loop, tighten_stage
from shared_utils.config import ExperimentConfig

from .episode import constraint_rows, run_episode, setup_experiment
from .lqr import lqr_design
from .noise import octagon_facets, octagon_vertices
from .sweep import EpisodeSummary, compare_k, moving_average, run_sweep

logger = logging.getLogger(__name__)

FD_STEP = 1e-6
DEFAULT_RADIUS = 0.02

CheckOutcome = Tuple[bool, str]


@dataclass
class CheckResult:
    name: str
    description: str
    passed: bool
    message: str
    seconds: float


def _copy(config: ExperimentConfig, **sections) -> ExperimentConfig:
    """Configuration copy with per-section overrides."""
    values = config.as_dict()
    for section, overrides in sections.items():
        values[section].update(overrides)
    return ExperimentConfig.from_dict(values)


def _radius(config: ExperimentConfig) -> float:
    return float(config.noise["circumradius"]) or DEFAULT_RADIUS


def _nominal_system(config: ExperimentConfig):
    system = config.system
    A = np.array(system["A"], dtype=float)
    B = np.array(system["B"], dtype=float)
    n_s = A.shape[0]
    C, D, c_bar = constraint_rows(system["state_lower"], system["state_upper"],
                                  system["action_lower"], system["action_upper"])
    H = np.diag(np.asarray(config.cost["stage_weights"], dtype=float))
    _, K = lqr_design(A, B, H[:n_s, :n_s], H[n_s:, n_s:])
    return A, B, C, D, c_bar, K


def _relative_error(value: np.ndarray, reference: np.ndarray) -> float:
    value, reference = np.atleast_1d(value), np.atleast_1d(reference)
    scale = max(1.0, float(np.max(np.abs(reference))))
    return float(np.max(np.abs(value - reference))) / scale


def _fraction_needed(total: int, numerator: int, denominator: int) -> int:
    return math.ceil(total * numerator / denominator)


_SWEEPS: Dict[str, List[EpisodeSummary]] = {}


def _sweep(config: ExperimentConfig, episodes: int) -> List[EpisodeSummary]:
    """Memoized sweep so that several checks can share the same episodes."""
    key = json.dumps(config.as_dict(), sort_keys=True) + f"|{episodes}"
    if key not in _SWEEPS:
        logger.info(f"Running {episodes} seeded episodes of {config.run['steps']} steps")
        _SWEEPS[key] = run_sweep(config, episodes)
    return _SWEEPS[key]


def _episode_scale(config: ExperimentConfig, quick: bool) -> Tuple[int, int]:
    """(episodes, steps) for the Monte-Carlo checks."""
    if quick:
        return 4, min(int(config.run["steps"]), 80)
    return 50, int(config.run["steps"])


def check_tightening_oracle(config: ExperimentConfig, quick: bool) -> CheckOutcome:
    """Stage tightenings against brute force over all vertex sequences, k <= 3."""
    A, B, C, D, _, K = _nominal_system(config)
    radius = _radius(config)
    corners = octagon_vertices(radius)
    d = tighten_stage(A, B, C, D, K, octagon_facets(radius), 3)
    A_K, C_K = closed_loop(A, B, C, D, K)
    powers = [np.linalg.matrix_power(A_K, j) for j in range(3)]
    worst = 0.0
    for k in range(1, 4):
        best = np.full(C_K.shape[0], -np.inf)
        for sequence in itertools.product(range(corners.shape[0]), repeat=k):
            error = sum(powers[j] @ corners[v] for j, v in enumerate(sequence))
            best = np.maximum(best, C_K @ error)
        worst = max(worst, float(np.max(np.abs(d[k] - best))))
    return worst <= 1e-8, f"largest deviation {worst:.2e} over k <= 3"


def _sample_datastore(rng: np.random.Generator, n_warm: int, n_extra: int) -> NoiseDatastore:
    """Datastore fed with a centered random cloud (warm-up) and further points."""
    store = NoiseDatastore(np.eye(2), np.zeros((2, 1)), warmup=n_warm)
    cloud = rng.normal(size=(n_warm, 2))
    cloud -= cloud.mean(axis=0)
    extra = 1.5 * rng.normal(size=(n_extra, 2))
    for t, w in enumerate(np.vstack([cloud, extra])):
        store.ingest(Transition(np.zeros(2), np.zeros(1), w, t=t))
    return store


def check_hull_oracle(config: ExperimentConfig, quick: bool) -> CheckOutcome:
    """Membership LP against a facet hull of the raw residuals."""
    rng = np.random.default_rng(int(config.run["seed"]))
    store = _sample_datastore(rng, 30, 30)
    raw = store.raw_residuals()
    qhull = ConvexHull(raw)
    expected = {tuple(np.round(raw[i], 12)) for i in qhull.vertices}
    kept = {tuple(np.round(v, 12)) for v in store.hull().vertices}
    if kept != expected:
        return False, f"hull keeps {len(kept)} vertices, facet hull has {len(expected)}"

    n_points = 100 if quick else 1000
    points = rng.uniform(-4.0, 4.0, size=(n_points, 2))
    hull = store.hull()
    disagreements = 0
    for point in points:
        oracle = bool(np.all(qhull.equations[:, :2] @ point + qhull.equations[:, 2] <= 1e-9))
        inside, _ = hull_membership(point, hull)
        disagreements += int(inside != oracle)
    return disagreements == 0, f"{disagreements} disagreements on {n_points} points, {len(kept)} vertices"


def check_compression(config: ExperimentConfig, quick: bool) -> CheckOutcome:
    """Random (M, m): all raw samples inside iff all hull vertices inside."""
    rng = np.random.default_rng(int(config.run["seed"]) + 1)
    trials = 10 if quick else 50
    agreed = 0
    for _ in range(trials):
        store = _sample_datastore(rng, 20, 40)
        raw, hull = store.raw_residuals(), store.hull().as_array(2)
        M = rng.normal(size=(6, 2))
        m = np.max(M @ raw.T, axis=1) * rng.uniform(0.9, 1.1, size=6)
        raw_ok = bool(np.all(M @ raw.T <= m[:, None] + 1e-10))
        hull_ok = bool(np.all(M @ hull.T <= m[:, None] + 1e-10))
        agreed += int(raw_ok == hull_ok)
    return agreed == trials, f"{agreed}/{trials} trials agree"


def _bounding_box_experiment(config: ExperimentConfig):
    return setup_experiment(_copy(config, noise={"initial_set": "bounding_box"}))


def _random_state(rng: np.random.Generator, config: ExperimentConfig, shrink: float = 0.8) -> np.ndarray:
    lower = np.asarray(config.system["state_lower"], dtype=float)
    upper = np.asarray(config.system["state_upper"], dtype=float)
    center, half = 0.5 * (upper + lower), 0.5 * (upper - lower)
    return center + shrink * half * rng.uniform(-1.0, 1.0, size=lower.shape)


def check_exact_penalty(config: ExperimentConfig, quick: bool) -> CheckOutcome:
    """Relaxed and unrelaxed MPC agree on feasible instances and use no slack."""
    exp = _bounding_box_experiment(config)
    rng = np.random.default_rng(int(config.run["seed"]) + 2)
    wanted = 10 if quick else 100
    n_s, n_a = exp.A.shape[0], exp.B.shape[1]
    compared, worst, worst_slack = 0, 0.0, 0.0
    for _ in range(5 * wanted):
        if compared == wanted:
            break
        s = _random_state(rng, config)
        ref = Reference(np.append(rng.uniform(-1.0, 1.0), np.zeros(n_s - 1)), np.zeros(n_a))
        qp, layout = build_qp(exp.params, exp.profile, s, ref, relaxed=False)
        try:
            exact = solve(qp)
        except Infeasible:
            continue
        ev = eval_v_policy(exp.params, exp.profile, s, ref)
        worst = max(worst, float(np.max(np.abs(ev.predicted_actions - layout.actions(exact.y_star)))))
        worst_slack = max(worst_slack, ev.slack_total)
        compared += 1
    passed = compared == wanted and worst <= 1e-8 and worst_slack <= SLACK_TOL
    return passed, (f"{compared} feasible instances, largest input deviation {worst:.2e}, "
                    f"largest slack {worst_slack:.2e}")


def check_rpi_invariance(config: ExperimentConfig, quick: bool) -> CheckOutcome:
    """Terminal states plus a worst-case-sized error stay safe under e+ = A_K e + w.

    States are random convex combinations of the terminal-set vertices; the
    error accumulated over the horizon is added before the closed-loop rollout.
    """
    exp = _bounding_box_experiment(config)
    profile, N = exp.profile, exp.params.N
    rng = np.random.default_rng(int(config.run["seed"]) + 3)
    corners = vertices(FacetPolytope(profile.G, -profile.g))
    W_corners = vertices(exp.params.W)
    n_states, n_sequences = (20, 10) if quick else (200, 50)
    horizon = 2 * max(profile.k_prime, 1)
    worst = -np.inf
    for _ in range(n_states):
        weights = rng.dirichlet(np.ones(corners.shape[0]))
        z = np.tile(weights @ corners, (n_sequences, 1))
        for _ in range(N):
            z = z @ profile.A_K.T + W_corners[rng.integers(0, W_corners.shape[0], size=n_sequences)]
        for _ in range(horizon + 1):
            worst = max(worst, float(np.max(z @ profile.C_K.T + exp.c_bar)))
            z = z @ profile.A_K.T + W_corners[rng.integers(0, W_corners.shape[0], size=n_sequences)]
    return worst <= 1e-9, (f"largest constraint residual {worst:.2e} over {n_states} x "
                           f"{n_sequences} rollouts of {horizon} steps (k'={profile.k_prime})")


def check_sensitivities(config: ExperimentConfig, quick: bool) -> CheckOutcome:
    """dQ/dtheta and dpsi/dtheta against central differences."""
    exp = _bounding_box_experiment(config)
    selection = exp.selection
    if not selection.blocks:
        return True, "no learnable parameters selected"
    rng = np.random.default_rng(int(config.run["seed"]) + 4)
    wanted = 3 if quick else 20
    n_s, n_a = exp.A.shape[0], exp.B.shape[1]
    a_lo = np.asarray(config.system["action_lower"], dtype=float)
    a_hi = np.asarray(config.system["action_upper"], dtype=float)
    theta0 = selection.vector(exp.params)
    sdc = exp.datastore.sdc_rows()
    worst_q, worst_psi, tested = 0.0, 0.0, 0
    for _ in range(5 * wanted):
        if tested == wanted:
            break
        theta = theta0.copy()
        if "m" in selection.slices(exp.params):
            sl = selection.slices(exp.params)["m"]
            theta[sl] *= rng.uniform(1.0, 1.5, size=theta[sl].shape)
        params = selection.apply(exp.params, theta)
        s = _random_state(rng, config, shrink=0.6)
        ref = Reference(np.append(rng.uniform(-1.0, 1.0), np.zeros(n_s - 1)), np.zeros(n_a))
        try:
            profile = make_profile(params, selection.profile_blocks)
            policy = eval_v_policy(params, profile, s, ref)
            a = np.clip(policy.action + rng.normal(scale=0.5, size=n_a), a_lo, a_hi)
            ev = eval_q(params, profile, s, a, ref, selection)
        except WeakActivation:
            continue
        except SafeRLError as e:
            logger.debug(f"Sensitivity point skipped: {e}")
            continue

        # dQ against central differences of the full pipeline
        fd_q = np.zeros(theta.size)
        for e in range(theta.size):
            values = []
            for sign in (1.0, -1.0):
                bumped = theta.copy()
                bumped[e] += sign * FD_STEP
                candidate = selection.apply(exp.params, bumped)
                values.append(eval_q(candidate, make_profile(candidate), s, a, ref).Q)
            fd_q[e] = (values[0] - values[1]) / (2 * FD_STEP)
        worst_q = max(worst_q, _relative_error(ev.grad_Q, fd_q))

        # dpsi on a nominal transition
        s_plus = exp.A @ s + exp.B @ a + exp.b
        tr = Transition(s, a, s_plus)
        target = stage_cost(exp.reward_H, s, a, ref) + params.gamma * policy.V
        problem = UpdateProblem(transition=tr, reference=ref, target=target, sdc=sdc,
                                floor=float(config.learning["positivity_floor"]))
        try:
            _, grad = td_residual(theta, selection, exp.params, problem)
        except WeakActivation:
            continue
        fd_psi = np.zeros(theta.size)
        for e in range(theta.size):
            bumped_up, bumped_down = theta.copy(), theta.copy()
            bumped_up[e] += FD_STEP
            bumped_down[e] -= FD_STEP
            fd_psi[e] = (td_value(bumped_up, selection, exp.params, problem)
                         - td_value(bumped_down, selection, exp.params, problem)) / (2 * FD_STEP)
        worst_psi = max(worst_psi, _relative_error(grad, fd_psi))
        tested += 1
    passed = tested == wanted and worst_q <= 1e-5 and worst_psi <= 1e-4
    return passed, (f"{tested} points, dQ relative error {worst_q:.2e}, "
                    f"dpsi relative error {worst_psi:.2e}")


def check_safety(config: ExperimentConfig, quick: bool) -> CheckOutcome:
    """No constraint violation and no slack when W contains the true noise set."""
    episodes, steps = _episode_scale(config, quick)
    cfg = _copy(config, noise={"initial_set": "bounding_box"}, run={"steps": steps},
                output={"write_svg": False})
    summaries = _sweep(cfg, episodes)
    aborted = sum(1 for s in summaries if s.aborted)
    violations = sum(s.violations for s in summaries)
    slack = sum(s.slack_steps for s in summaries)
    passed = aborted == 0 and violations == 0 and slack == 0
    return passed, (f"{episodes} episodes x {steps} steps: {violations} violations, "
                    f"{slack} slack steps, {aborted} aborted")


def check_td_descent(config: ExperimentConfig, quick: bool) -> CheckOutcome:
    """Moving average of psi at the end below its value early in the episode."""
    episodes, steps = _episode_scale(config, quick)
    cfg = _copy(config, noise={"initial_set": "bounding_box"}, run={"steps": steps},
                output={"write_svg": False})
    summaries = _sweep(cfg, episodes)
    window = 20
    improved = 0
    for summary in summaries:
        if summary.aborted:
            continue
        early = moving_average(summary.psi, window, window)
        late = moving_average(summary.psi, window, len(summary.psi))
        improved += int(late < early)
    needed = _fraction_needed(episodes, 45, 50)
    return improved >= needed, f"{improved}/{episodes} episodes improved (need {needed})"


def check_learning_effect(config: ExperimentConfig, quick: bool) -> CheckOutcome:
    """Tightening on the upper position bound shrinks and the terminal set grows."""
    steps = min(int(config.run["steps"]), 120) if quick else int(config.run["steps"])
    cfg = _copy(config, run={"steps": steps}, output={"write_svg": False})
    log = run_episode(cfg)
    d_first, d_last = log.records[0].d_N[0], log.records[-1].d_N[0]
    area_first, area_last = log.snapshots[0].terminal_area, log.snapshots[-1].terminal_area
    passed = d_last < d_first and area_last > area_first
    return passed, (f"d_N on p <= 1: {d_first:.6g} -> {d_last:.6g}; "
                    f"terminal area {area_first:.6g} -> {area_last:.6g}")


def check_learned_k(config: ExperimentConfig, quick: bool) -> CheckOutcome:
    """Learning K as well does not increase closed-loop cost or shrink the terminal set."""
    episodes, steps = _episode_scale(config, quick)
    cfg = _copy(config, noise={"initial_set": "bounding_box"}, run={"steps": steps},
                output={"write_svg": False})
    frame = compare_k(cfg, episodes)
    valid = frame[~frame["aborted"]]
    cheaper = int((valid["cost_k"] <= valid["cost_base"]).sum())
    larger = int((valid["area_k"] >= valid["area_base"]).sum())
    needed = _fraction_needed(episodes, 40, 50)
    return (cheaper >= needed and larger >= needed,
            f"cost not higher in {cheaper}/{episodes}, area not smaller in {larger}/{episodes} "
            f"(need {needed})")


# Registry: (name, function, description)
CHECKS: List[Tuple[str, Callable[[ExperimentConfig, bool], CheckOutcome], str]] = [
    ('tightening', check_tightening_oracle,
     'Stage tightenings equal exhaustive vertex-sequence maximization'),
    ('hull', check_hull_oracle,
     'Hull membership LP agrees with a facet-hull oracle'),
    ('compression', check_compression,
     'SDC over hull vertices is equivalent to SDC over all samples'),
    ('exact_penalty', check_exact_penalty,
     'Relaxed MPC returns the unrelaxed solution on feasible instances'),
    ('rpi', check_rpi_invariance,
     'Terminal set is robustly invariant under vertex disturbances'),
    ('sensitivities', check_sensitivities,
     'Parametric gradients match central finite differences'),
    ('safety', check_safety,
     'Closed-loop episodes never violate the safety constraints'),
    ('td_descent', check_td_descent,
     'Temporal-difference residual decreases over an episode'),
    ('learning_effect', check_learning_effect,
     'Learning loosens the active tightening and enlarges the terminal set'),
    ('learned_k', check_learned_k,
     'Learning the feedback gain does not hurt closed-loop performance'),
]


def check_names() -> List[str]:
    return [name for name, _, _ in CHECKS]


def run_checks(config: ExperimentConfig, names: Optional[Sequence[str]] = None,
               quick: bool = False) -> List[CheckResult]:
    """Run the selected checks (all by default) in registry order.

    Raises:
        ValueError: on unknown check names
    """
    if names:
        unknown = [n for n in names if n not in check_names()]
        if unknown:
            raise ValueError(f"Unknown checks: {unknown}; available: {check_names()}")
    results = []
    for name, func, description in CHECKS:
        if names and name not in names:
            logger.debug(f"Skipping check '{name}': {description}")
            continue
        logger.debug(f"Running check '{name}': {description}")
        start = time.perf_counter()
        try:
            passed, message = func(config, quick)
        except Exception as e:
            logger.error(f"Error in check '{name}': {e}")
            passed, message = False, f"{type(e).__name__}: {e}"
        results.append(CheckResult(name=name, description=description, passed=passed,
                                   message=message, seconds=time.perf_counter() - start))
    return results
