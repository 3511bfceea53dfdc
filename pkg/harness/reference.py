"""
Piecewise-constant position reference.
"""

from typing import Tuple

import numpy as np

from safe_rl.mpc import Reference

STEP_START = 25
STEP_END = 120


def reference(t: int, start: int = STEP_START, end: int = STEP_END,
              low: float = -1.0, high: float = 1.0) -> Tuple[float, float, float]:
    """(p_r, v_r, a_r): p_r = high for start <= t <= end, low otherwise."""
    if t < 0:
        raise ValueError(f"time index must be nonnegative, got {t}")
    p_r = high if start <= t <= end else low
    return p_r, 0.0, 0.0


def reference_point(t: int, n_s: int = 2, n_a: int = 1, **schedule) -> Reference:
    """Reference on the first state (position), zero elsewhere."""
    p_r, v_r, a_r = reference(t, **schedule)
    state = np.zeros(n_s)
    state[0] = p_r
    if n_s > 1:
        state[1] = v_r
    return Reference(state=state, action=np.full(n_a, a_r))
