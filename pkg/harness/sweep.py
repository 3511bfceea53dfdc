"""
Seeded multi-episode sweeps run in a process pool.
"""

import logging
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional

import numpy as np
import pandas as pd

from safe_rl.errors import EpisodeAborted
from shared_utils.config import ExperimentConfig

from .episode import run_episode

logger = logging.getLogger(__name__)


@dataclass
class EpisodeSummary:
    """Compact outcome of one seeded episode."""
    seed: int
    steps: int
    violations: int
    unexplained_violations: int
    slack_steps: int
    closed_loop_cost: float
    psi: List[float] = field(default_factory=list)
    tightening_first: List[float] = field(default_factory=list)
    tightening_last: List[float] = field(default_factory=list)
    terminal_area_first: float = 0.0
    terminal_area_last: float = 0.0
    aborted: Optional[str] = None

    def to_row(self) -> Dict[str, Any]:
        return {
            "seed": self.seed, "steps": self.steps, "violations": self.violations,
            "unexplained_violations": self.unexplained_violations, "slack_steps": self.slack_steps,
            "closed_loop_cost": self.closed_loop_cost,
            "terminal_area_first": self.terminal_area_first,
            "terminal_area_last": self.terminal_area_last,
            "aborted": self.aborted or "",
        }


def spawn_seeds(base_seed: int, count: int) -> List[int]:
    """Independent episode seeds from one base seed."""
    children = np.random.SeedSequence(base_seed).spawn(count)
    return [int(child.generate_state(1)[0]) for child in children]


def run_seed(config_values: Dict[str, Any], seed: int) -> EpisodeSummary:
    """Run one episode with the given seed (process-pool entry point)."""
    config = ExperimentConfig.from_dict(config_values)
    config.run["seed"] = seed
    try:
        log = run_episode(config)
    except EpisodeAborted as e:
        return EpisodeSummary(seed=seed, steps=0, violations=0, unexplained_violations=0,
                              slack_steps=0, closed_loop_cost=float("nan"), aborted=str(e))
    first = log.snapshots[0] if log.snapshots else None
    last = log.snapshots[-1] if log.snapshots else None
    return EpisodeSummary(
        seed=seed,
        steps=len(log.records),
        violations=len(log.violation_steps()),
        unexplained_violations=len(log.unexplained_violations()),
        slack_steps=len(log.slack_steps()),
        closed_loop_cost=log.closed_loop_cost(),
        psi=[row["psi"] for row in log.learning],
        tightening_first=log.records[0].d_N.tolist(),
        tightening_last=log.records[-1].d_N.tolist(),
        terminal_area_first=first.terminal_area if first else 0.0,
        terminal_area_last=last.terminal_area if last else 0.0,
    )


def run_sweep(config: ExperimentConfig, episodes: int, workers: Optional[int] = None,
              progress: Optional[Callable[[int, int], None]] = None) -> List[EpisodeSummary]:
    """Run `episodes` seeded episodes concurrently; results ordered by seed index.

    Args:
        config: Base configuration (run.seed is the base seed)
        episodes: Number of episodes
        workers: Process count (1 runs in-process)
        progress: Optional callback (done, total)
    """
    seeds = spawn_seeds(int(config.run["seed"]), episodes)
    values = config.as_dict()
    results: Dict[int, EpisodeSummary] = {}
    if workers == 1:
        for i, seed in enumerate(seeds):
            results[i] = run_seed(values, seed)
            if progress:
                progress(i + 1, episodes)
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(run_seed, values, seed): i for i, seed in enumerate(seeds)}
            for done, future in enumerate(as_completed(futures), start=1):
                results[futures[future]] = future.result()
                if progress:
                    progress(done, episodes)
    return [results[i] for i in range(episodes)]


def sweep_frame(summaries: List[EpisodeSummary]) -> pd.DataFrame:
    return pd.DataFrame([s.to_row() for s in summaries])


def moving_average(values: List[float], window: int, end: int) -> float:
    """Mean of the finite values in the window ending at index `end` (exclusive)."""
    chunk = np.asarray(values[max(0, end - window):end], dtype=float)
    chunk = chunk[np.isfinite(chunk)]
    return float(np.mean(chunk)) if chunk.size else float("nan")


def with_selection(config: ExperimentConfig, blocks: List[str]) -> ExperimentConfig:
    """Copy of the configuration with another learnable parameter selection."""
    values = config.as_dict()
    values["learning"]["theta_selection"] = list(blocks)
    return ExperimentConfig.from_dict(values)


def compare_k(config: ExperimentConfig, episodes: int, workers: Optional[int] = None,
              progress: Optional[Callable[[int, int], None]] = None) -> pd.DataFrame:
    """Paired seeds with and without the feedback gain among the learned parameters."""
    base_blocks = [b for b in config.learning["theta_selection"] if b != "K"]
    base = run_sweep(with_selection(config, base_blocks), episodes, workers, progress)
    learned = run_sweep(with_selection(config, base_blocks + ["K"]), episodes, workers, progress)
    rows = []
    for plain, with_k in zip(base, learned):
        rows.append({
            "seed": plain.seed,
            "cost_base": plain.closed_loop_cost,
            "cost_k": with_k.closed_loop_cost,
            "area_base": plain.terminal_area_last,
            "area_k": with_k.terminal_area_last,
            "unexplained_base": plain.unexplained_violations,
            "unexplained_k": with_k.unexplained_violations,
            "aborted": bool(plain.aborted or with_k.aborted),
        })
    logger.info(f"Compared {episodes} paired seeds with selections {base_blocks} and {base_blocks + ['K']}")
    return pd.DataFrame(rows)
