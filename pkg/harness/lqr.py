"""
LQR design by Riccati fixed-point iteration.
"""

import logging
from typing import Tuple

import numpy as np
from scipy import linalg as la

from safe_rl.errors import NotStabilizable
from safe_rl.tightening import spectral_radius

logger = logging.getLogger(__name__)

RICCATI_TOL = 1e-12
MAX_RICCATI_ITERATIONS = 100_000
DIVERGENCE_BOUND = 1e12


def riccati_residual(A: np.ndarray, B: np.ndarray, Q: np.ndarray, R: np.ndarray,
                     P: np.ndarray) -> float:
    """Largest entry of |Q + A'PA - A'PB (R + B'PB)^-1 B'PA - P|."""
    BtPA = B.T @ P @ A
    rhs = Q + A.T @ P @ A - BtPA.T @ la.solve(R + B.T @ P @ B, BtPA, assume_a='pos')
    return float(np.max(np.abs(rhs - P)))


def lqr_design(A: np.ndarray, B: np.ndarray, Q_w: np.ndarray, R_w: np.ndarray,
               tol: float = RICCATI_TOL,
               max_iterations: int = MAX_RICCATI_ITERATIONS) -> Tuple[np.ndarray, np.ndarray]:
    """Infinite-horizon discrete LQR.

    Iterates P <- Q + A'PA - A'PB (R + B'PB)^-1 B'PA from P = Q until the
    largest entry change is below tol.

    Args:
        A, B: Nominal model
        Q_w: State weight (positive semidefinite)
        R_w: Input weight (positive definite)

    Returns:
        Tuple of (P, K) with u = -K x

    Raises:
        NotStabilizable: if the iteration diverges or A - BK is not Schur stable
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    Q = np.atleast_2d(np.asarray(Q_w, dtype=float))
    R = np.atleast_2d(np.asarray(R_w, dtype=float))

    P = Q.copy()
    for iteration in range(max_iterations):
        BtPA = B.T @ P @ A
        P_next = Q + A.T @ P @ A - BtPA.T @ la.solve(R + B.T @ P @ B, BtPA, assume_a='pos')
        P_next = 0.5 * (P_next + P_next.T)
        if not np.all(np.isfinite(P_next)) or np.max(np.abs(P_next)) > DIVERGENCE_BOUND:
            raise NotStabilizable(f"Riccati iteration diverged after {iteration + 1} steps")
        change = float(np.max(np.abs(P_next - P)))
        P = P_next
        if change <= tol:
            break
    else:
        raise NotStabilizable(f"Riccati iteration did not converge in {max_iterations} steps")

    K = la.solve(R + B.T @ P @ B, B.T @ P @ A, assume_a='pos')
    radius = spectral_radius(A - B @ K)
    if radius >= 1.0:
        raise NotStabilizable(f"LQR closed loop has spectral radius {radius:.6f}")
    logger.debug(f"LQR converged in {iteration + 1} iterations, rho(A-BK)={radius:.4f}")
    return P, K
