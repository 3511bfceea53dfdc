"""
Closed-loop learning episode on the double-integrator experiment.

Per step: policy (greedy or exploratory) -> safety check -> plant ->
residual ingestion (with immediate SDC adaptation) -> Q-learning update.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from safe_rl.datastore import NoiseDatastore, Transition, initial_uncertainty_set
from safe_rl.errors import EpisodeAborted, SafeRLError
from safe_rl.learner import QLearner
from safe_rl.mpc import (ROW_INPUT, ROW_STATE, ROW_TERMINAL, SLACK_TOL, MpcParams, PolicyEval, ThetaSelection,
                         eval_v_policy, explore_action, make_profile, stage_cost)
from safe_rl.polytope import FacetPolytope, polygon_area, vertices
from safe_rl.tightening import TighteningProfile, rpi_cloud
from shared_utils.config import ExperimentConfig

from .lqr import lqr_design
from .noise import octagon_sampler, octagon_vertices
from .reference import reference_point

logger = logging.getLogger(__name__)

VIOLATION_TOL = 1e-9


def constraint_rows(state_lower, state_upper, action_lower, action_upper):
    """Box bounds as rows C s + D a + c_bar <= 0, ordered s <= u, -s <= -l, a <= u, -a <= -l."""
    s_lo, s_hi = np.asarray(state_lower, float), np.asarray(state_upper, float)
    a_lo, a_hi = np.asarray(action_lower, float), np.asarray(action_upper, float)
    n_s, n_a = s_lo.shape[0], a_lo.shape[0]
    C = np.vstack([np.eye(n_s), -np.eye(n_s), np.zeros((2 * n_a, n_s))])
    D = np.vstack([np.zeros((2 * n_s, n_a)), np.eye(n_a), -np.eye(n_a)])
    c_bar = np.concatenate([-s_hi, s_lo, -a_hi, a_lo])
    return C, D, c_bar


@dataclass
class StepRecord:
    t: int
    state: np.ndarray
    action: np.ndarray
    w: np.ndarray
    reference: np.ndarray
    V: float
    psi: float
    slack_total: float
    feasible_unrelaxed: bool
    violation: bool
    violation_magnitude: float
    sdc_violated: bool
    hull_changed: bool
    hull_size: int
    exploring: bool
    stage_cost: float
    rho: float
    alpha_effective: float
    n_active: int
    d_N: np.ndarray
    m: np.ndarray

    def to_row(self) -> Dict[str, Any]:
        row: Dict[str, Any] = {"t": self.t}
        row.update({f"s_{i}": v for i, v in enumerate(self.state)})
        row.update({f"a_{i}": v for i, v in enumerate(self.action)})
        row.update({f"w_{i}": v for i, v in enumerate(self.w)})
        row.update({f"ref_{i}": v for i, v in enumerate(self.reference)})
        row.update({
            "V": self.V, "psi": self.psi, "slack_total": self.slack_total,
            "feasible_unrelaxed": self.feasible_unrelaxed, "violation": self.violation,
            "violation_magnitude": self.violation_magnitude, "sdc_violated": self.sdc_violated,
            "hull_changed": self.hull_changed, "hull_size": self.hull_size,
            "exploring": self.exploring, "stage_cost": self.stage_cost, "rho": self.rho,
            "alpha_effective": self.alpha_effective, "n_active": self.n_active,
        })
        row.update({f"d_N_{i}": v for i, v in enumerate(self.d_N)})
        row.update({f"m_{i}": v for i, v in enumerate(self.m)})
        return row


@dataclass
class Snapshot:
    """Geometry behind the state-space and noise-space figures at one step."""
    t: int
    state: np.ndarray
    reference: np.ndarray
    W: FacetPolytope
    W_vertices: np.ndarray
    hull_vertices: np.ndarray
    residuals: np.ndarray
    terminal_vertices: np.ndarray
    feedback_vertices: np.ndarray
    rpi_cloud: np.ndarray
    predicted_states: np.ndarray
    tightened_offsets: np.ndarray
    state_lower: np.ndarray
    state_upper: np.ndarray
    circumradius: float

    @property
    def terminal_area(self) -> float:
        return polygon_area(self.terminal_vertices)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "t": self.t,
            "state": self.state.tolist(),
            "reference": self.reference.tolist(),
            "W": self.W.to_dict(),
            "W_vertices": self.W_vertices.tolist(),
            "hull_vertices": self.hull_vertices.tolist(),
            "residuals": self.residuals.tolist(),
            "terminal_vertices": self.terminal_vertices.tolist(),
            "terminal_area": self.terminal_area,
            "feedback_vertices": self.feedback_vertices.tolist(),
            "rpi_cloud": self.rpi_cloud.tolist(),
            "predicted_states": self.predicted_states.tolist(),
            "tightened_offsets": self.tightened_offsets.tolist(),
            "state_lower": self.state_lower.tolist(),
            "state_upper": self.state_upper.tolist(),
            "circumradius": self.circumradius,
            "octagon": octagon_vertices(self.circumradius).tolist(),
        }


@dataclass
class RunLog:
    """Per-step records, residual stream, learning log and snapshots of one episode."""
    config: Dict[str, Any]
    records: List[StepRecord] = field(default_factory=list)
    residuals: List[Dict[str, Any]] = field(default_factory=list)
    learning: List[Dict[str, Any]] = field(default_factory=list)
    snapshots: List[Snapshot] = field(default_factory=list)
    aborted: Optional[str] = None

    def violation_steps(self) -> List[int]:
        return [r.t for r in self.records if r.violation]

    def unexplained_violations(self) -> List[int]:
        """Violations not immediately preceded by a residual escaping W."""
        escaped = {r.t for r in self.records if r.sdc_violated}
        return [t for t in self.violation_steps() if (t - 1) not in escaped]

    def slack_steps(self) -> List[int]:
        return [r.t for r in self.records if r.slack_total > SLACK_TOL]

    def closed_loop_cost(self) -> float:
        return float(sum(r.stage_cost for r in self.records))

    def records_frame(self) -> pd.DataFrame:
        return pd.DataFrame([r.to_row() for r in self.records])

    def residuals_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.residuals)

    def learning_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.learning)

    def summary(self) -> Dict[str, Any]:
        return {
            "steps": len(self.records),
            "violations": len(self.violation_steps()),
            "unexplained_violations": len(self.unexplained_violations()),
            "slack_steps": len(self.slack_steps()),
            "closed_loop_cost": self.closed_loop_cost(),
            "accepted_updates": sum(1 for row in self.learning if row.get("accepted")),
            "aborted": self.aborted,
        }


@dataclass
class Experiment:
    """Everything an episode needs, built from a configuration."""
    config: ExperimentConfig
    A: np.ndarray
    B: np.ndarray
    b: np.ndarray
    C: np.ndarray
    D: np.ndarray
    c_bar: np.ndarray
    reward_H: np.ndarray
    params: MpcParams
    profile: TighteningProfile
    selection: ThetaSelection
    datastore: NoiseDatastore
    learner: QLearner
    rng: np.random.Generator
    state: np.ndarray
    warmup_residuals: List[Dict[str, Any]]

    def reference(self, t: int):
        run = self.config.run
        return reference_point(t, n_s=self.A.shape[0], n_a=self.B.shape[1],
                               start=run["reference_start"], end=run["reference_end"],
                               low=run["reference_low"], high=run["reference_high"])


def _residual_row(t: int, w: np.ndarray, hull_changed: bool, sdc_violated: bool) -> Dict[str, Any]:
    row: Dict[str, Any] = {"t": t}
    row.update({f"w_{i}": v for i, v in enumerate(w)})
    row.update({"hull_changed": hull_changed, "sdc_violated": sdc_violated})
    return row


def setup_experiment(config: ExperimentConfig) -> Experiment:
    """LQR design, warm-up residuals, initial uncertainty set and learner.

    The warm-up applies a = 0 at the initial state for `noise.warmup` steps
    before t = 0; their residuals seed the datastore and the initial box.
    """
    config.validate()
    system, noise, learning = config.system, config.noise, config.learning
    A = np.array(system["A"], dtype=float)
    B = np.array(system["B"], dtype=float)
    b = np.array(system["b"], dtype=float)
    n_s, n_a = B.shape
    C, D, c_bar = constraint_rows(system["state_lower"], system["state_upper"],
                                  system["action_lower"], system["action_upper"])
    H = np.diag(np.asarray(config.cost["stage_weights"], dtype=float))
    P, K = lqr_design(A, B, H[:n_s, :n_s], H[n_s:, n_s:])

    rng = np.random.default_rng(config.run["seed"])
    datastore = NoiseDatastore(A, B, b, warmup=noise["warmup"], max_vertices=noise["max_vertices"],
                               debug_buffer=noise["debug_buffer"])
    s0 = np.array(system["initial_state"], dtype=float)
    radius = float(noise["circumradius"])
    warmup_rows, samples = [], []
    for i in range(noise["warmup"]):
        # plant
        w = octagon_sampler(radius, rng)
        t = i - noise["warmup"]
        report = datastore.ingest(Transition(s0, np.zeros(n_a), A @ s0 + b + w, t=t))
        samples.append(report.residual.w)
        warmup_rows.append(_residual_row(t, report.residual.w, report.hull_changed, False))

    if noise["initial_set"] == "bounding_box" or not samples:
        corners = octagon_vertices(radius) if radius > 0 else np.zeros((1, n_s))
        W0 = initial_uncertainty_set(corners, noise["inflation"])
    else:
        W0 = initial_uncertainty_set(np.vstack(samples), noise["inflation"])

    params = MpcParams.from_matrices(H, P, A, B, C, D, c_bar, K, W0,
                                     gamma=config.mpc["gamma"], N=config.mpc["horizon"],
                                     b=b, rho=config.mpc["rho"],
                                     terminal_cap=config.mpc["terminal_cap"])
    selection = ThetaSelection(tuple(learning["theta_selection"]))
    profile = make_profile(params, selection.profile_blocks)
    learner = QLearner(selection, reward_H=H, alpha=learning["alpha"],
                       floor=learning["positivity_floor"], max_iterations=learning["max_iterations"],
                       tol=learning["tolerance"], guard_halvings=learning["guard_halvings"])
    logger.info(f"Experiment ready: N={params.N}, rho={params.rho:.3g}, k'={profile.k_prime}, "
                f"{profile.G.shape[0]} terminal rows, selection={list(selection.blocks)}")
    return Experiment(config=config, A=A, B=B, b=b, C=C, D=D, c_bar=c_bar, reward_H=H,
                      params=params, profile=profile, selection=selection, datastore=datastore,
                      learner=learner, rng=rng, state=s0, warmup_residuals=warmup_rows)


def _n_active(ev: PolicyEval) -> int:
    kinds = ev.layout.row_kind[list(ev.solve.active_set)] if ev.solve.active_set else np.zeros(0)
    return int(np.sum(np.isin(kinds, (ROW_INPUT, ROW_STATE, ROW_TERMINAL))))


def take_snapshot(exp: Experiment, t: int, ev: PolicyEval, ref) -> Snapshot:
    """Geometry at step t; uses its own RNG stream for the RPI cloud."""
    params, profile = exp.params, exp.profile
    system = exp.config.system
    try:
        terminal = vertices(FacetPolytope(profile.G, -profile.g))
    except (SafeRLError, ValueError, RuntimeError):
        terminal = np.zeros((0, exp.A.shape[0]))
    try:
        feedback = vertices(FacetPolytope(profile.C_K, -exp.c_bar))
    except (SafeRLError, ValueError, RuntimeError):
        feedback = np.zeros((0, exp.A.shape[0]))
    W_vertices = vertices(params.W)
    cloud_rng = np.random.default_rng([int(exp.config.run["seed"]), t])
    cloud = rpi_cloud(profile.A_K, W_vertices, cloud_rng,
                      n_points=int(exp.config.output["rpi_points"]))
    return Snapshot(
        t=t, state=exp.state.copy(), reference=ref.state.copy(), W=params.W.copy(),
        W_vertices=W_vertices, hull_vertices=exp.datastore.hull().as_array(exp.A.shape[0]),
        residuals=exp.datastore.raw_residuals(), terminal_vertices=terminal,
        feedback_vertices=feedback, rpi_cloud=cloud, predicted_states=ev.predicted_states.copy(),
        tightened_offsets=profile.c.copy(),
        state_lower=np.array(system["state_lower"], dtype=float),
        state_upper=np.array(system["state_upper"], dtype=float),
        circumradius=float(exp.config.noise["circumradius"]),
    )


def run_episode(config: ExperimentConfig,
                progress: Optional[Callable[[int, int, StepRecord], None]] = None) -> RunLog:
    """Run one closed-loop learning episode.

    Args:
        config: Experiment configuration
        progress: Optional callback (t, steps, record) after every step

    Returns:
        RunLog

    Raises:
        EpisodeAborted: if the MPC cannot be solved at some step
    """
    exp = setup_experiment(config)
    log = RunLog(config=config.as_dict(), residuals=list(exp.warmup_residuals))
    steps = int(config.run["steps"])
    exploration = config.exploration
    snapshot_steps = set(int(t) for t in config.output["snapshot_steps"]) | {steps - 1}
    n_a = exp.B.shape[1]
    warm_start: Optional[Sequence[int]] = None

    for t in range(steps):
        ref, ref_next = exp.reference(t), exp.reference(t + 1)
        s = exp.state
        # policy
        exploring = bool(exploration["enabled"]) and (t + 1) % int(exploration["every"]) == 0
        try:
            if exploring:
                q = exp.rng.uniform(-exploration["magnitude"], exploration["magnitude"], size=n_a)
                ev = explore_action(exp.params, exp.profile, s, q, mode=exploration["mode"],
                                    reference=ref, proximity_weight=exploration["proximity_weight"])
            else:
                ev = eval_v_policy(exp.params, exp.profile, s, ref, warm_start=warm_start)
                warm_start = ev.solve.active_set
        except SafeRLError as e:
            log.aborted = f"t={t}: {type(e).__name__}: {e}"
            logger.error(f"Episode aborted at t={t}: {e}")
            raise EpisodeAborted(log.aborted) from e
        if ev.rho != exp.params.rho:
            exp.params = replace(exp.params, rho=ev.rho)

        # safety check on the applied pair
        a = ev.action
        residual = exp.C @ s + exp.D @ a + exp.c_bar
        magnitude = float(np.max(residual))
        violation = magnitude > VIOLATION_TOL
        if violation:
            logger.warning(f"t={t}: safety constraint violated by {magnitude:.3e}")
        if t in snapshot_steps:
            log.snapshots.append(take_snapshot(exp, t, ev, ref))

        w = octagon_sampler(float(config.noise["circumradius"]), exp.rng)
        s_plus = exp.A @ s + exp.B @ a + exp.b + w
        tr = Transition(s=s.copy(), a=a.copy(), s_plus=s_plus, t=t)
        # noise datastore; W is enlarged when a new sample breaks the SDC rows
        ingest = exp.datastore.ingest(tr, exp.params.W)
        if ingest.sdc_violated:
            exp.params = replace(exp.params, W=ingest.W)
            exp.profile = make_profile(exp.params, exp.selection.profile_blocks)
            warm_start = None
        log.residuals.append(_residual_row(t, ingest.residual.w, ingest.hull_changed, ingest.sdc_violated))

        # learning update
        exp.params, profile, update = exp.learner.update(
            exp.params, exp.profile, tr, ref, ref_next, exp.datastore.sdc_rows())
        if profile is not exp.profile:
            exp.profile = profile
            warm_start = None
        log.learning.append(update.to_row())

        # record
        record = StepRecord(
            t=t, state=s.copy(), action=a.copy(), w=w, reference=ref.state.copy(),
            V=float(ev.V), psi=update.psi, slack_total=ev.slack_total,
            feasible_unrelaxed=ev.feasible_unrelaxed, violation=violation,
            violation_magnitude=max(magnitude, 0.0), sdc_violated=ingest.sdc_violated,
            hull_changed=ingest.hull_changed, hull_size=ingest.hull_size, exploring=exploring,
            stage_cost=stage_cost(exp.reward_H, s, a, ref), rho=exp.params.rho,
            alpha_effective=update.alpha_effective, n_active=_n_active(ev),
            d_N=exp.profile.d[-1].copy(), m=exp.params.W.m.copy(),
        )
        log.records.append(record)
        if progress is not None:
            progress(t, steps, record)
        exp.state = s_plus

    logger.info(f"Episode finished: {log.summary()}")
    return log
