"""
SVG figures of run snapshots and histories.

Each snapshot figure has a state-space panel (constraint box, feedback
constraint set, RPI cloud, terminal set, predicted trajectory, tightened
bounds) and a noise-space panel (true octagon, residuals, hull vertices, W).
"""

import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
from matplotlib.patches import Polygon, Rectangle

from shared_utils.file_operations import ensure_directory_exists

logger = logging.getLogger(__name__)


def _polygon(ax, points, **kwargs):
    points = np.asarray(points, dtype=float)
    if points.ndim == 2 and points.shape[0] >= 3:
        ax.add_patch(Polygon(points, closed=True, **kwargs))


def plot_snapshot(snapshot: Dict[str, Any], path: Union[str, Path],
                  background: Optional[Dict[str, Any]] = None) -> Path:
    """Render one snapshot (optionally over an earlier one) to SVG."""
    fig, (ax_state, ax_noise) = plt.subplots(2, 1, figsize=(6, 9))
    lower = np.asarray(snapshot["state_lower"])
    upper = np.asarray(snapshot["state_upper"])

    ax_state.add_patch(Rectangle(lower, *(upper - lower), color="lightblue", alpha=0.5,
                                 label="state constraints"))
    _polygon(ax_state, snapshot["feedback_vertices"], color="green", alpha=0.3, label="constraints with K")
    cloud = np.asarray(snapshot["rpi_cloud"])
    if cloud.size:
        ax_state.scatter(cloud[:, 0], cloud[:, 1], s=1, color="red", alpha=0.3, label="RPI samples")
    if background is not None:
        _polygon(ax_state, background["terminal_vertices"], fill=False, edgecolor="cyan",
                 linestyle=":", label=f"terminal set t={background['t']}")
    _polygon(ax_state, snapshot["terminal_vertices"], color="cyan", alpha=0.5,
             label=f"terminal set t={snapshot['t']}")
    predicted = np.asarray(snapshot["predicted_states"])
    ax_state.plot(predicted[:, 0], predicted[:, 1], "k-", linewidth=1.2, label="prediction")
    state = snapshot["state"]
    ref = snapshot["reference"]
    ax_state.plot(state[0], state[1], "ro", label="state")
    ax_state.plot(ref[0], ref[1], "o", markerfacecolor="none", markeredgecolor="red", label="reference")
    offsets = np.asarray(snapshot["tightened_offsets"])
    n_s = lower.shape[0]
    # rows 0..n_s-1 are s_i <= upper_i, c_k = c_bar + d_k
    ax_state.axvline(-offsets[-1, 0], color="black", linestyle="--", linewidth=0.8)
    ax_state.axvline(offsets[-1, n_s], color="black", linestyle="--", linewidth=0.8)
    ax_state.set_xlim(lower[0] - 0.1, upper[0] + 0.1)
    ax_state.set_ylim(lower[1] - 0.1, upper[1] + 0.1)
    ax_state.set_xlabel("p")
    ax_state.set_ylabel("v")
    ax_state.set_title(f"State space, t={snapshot['t']}")
    ax_state.legend(fontsize=6, loc="lower right")

    _polygon(ax_noise, snapshot["octagon"], fill=False, edgecolor="gray", label="true noise set")
    if background is not None:
        _polygon(ax_noise, background["W_vertices"], color="cyan", alpha=0.15,
                 label=f"W t={background['t']}")
    _polygon(ax_noise, snapshot["W_vertices"], color="cyan", alpha=0.4, label=f"W t={snapshot['t']}")
    residuals = np.asarray(snapshot["residuals"])
    if residuals.size:
        ax_noise.scatter(residuals[:, 0], residuals[:, 1], s=4, color="black", label="residuals")
    hull = np.asarray(snapshot["hull_vertices"])
    if hull.size:
        ax_noise.scatter(hull[:, 0], hull[:, 1], s=12, color="red", label="hull vertices")
    ax_noise.set_aspect("equal", adjustable="datalim")
    ax_noise.set_xlabel("w_p")
    ax_noise.set_ylabel("w_v")
    ax_noise.set_title("Noise space")
    ax_noise.legend(fontsize=6, loc="lower right")

    fig.tight_layout()
    path = Path(path)
    ensure_directory_exists(path.parent)
    fig.savefig(path, format="svg")
    plt.close(fig)
    logger.debug(f"Wrote snapshot figure {path}")
    return path


def plot_snapshots(snapshots: List[Dict[str, Any]], output_dir: Union[str, Path]) -> List[Path]:
    """One SVG per snapshot; each later snapshot is drawn over the first."""
    paths = []
    first = snapshots[0] if snapshots else None
    for snap in snapshots:
        background = first if first is not None and snap["t"] != first["t"] else None
        paths.append(plot_snapshot(snap, Path(output_dir) / f"snapshot_{snap['t']}.svg", background))
    return paths


def plot_history(run_log: pd.DataFrame, path: Union[str, Path]) -> Path:
    """Time series of position, reference, input and the steady tightening of p <= upper."""
    fig, axes = plt.subplots(3, 1, figsize=(7, 8), sharex=True)
    axes[0].plot(run_log["t"], run_log["s_0"], label="p")
    axes[0].step(run_log["t"], run_log["ref_0"], where="post", linestyle="--", label="p_r")
    axes[0].legend(fontsize=7)
    axes[1].plot(run_log["t"], run_log["a_0"], label="a")
    axes[1].legend(fontsize=7)
    axes[2].plot(run_log["t"], run_log["d_N_0"], label="tightening of p <= upper")
    axes[2].set_xlabel("t")
    axes[2].legend(fontsize=7)
    fig.tight_layout()
    path = Path(path)
    ensure_directory_exists(path.parent)
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path
