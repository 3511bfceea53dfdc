"""
Noise datastore: model residuals, the compressed sample hull and the SDC rows.

Only the hull vertices are kept once the hull contains the origin in its
interior span; raw residuals go to a bounded debug buffer.
"""

import logging
from collections import deque
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DimensionMismatch
from .polytope import (FacetPolytope, VertexPolytope, facet_violation, hull_insert,
                       in_convex_hull, origin_in_hull, sdc_adapt)

logger = logging.getLogger(__name__)

WARMUP_SAMPLES = 20
DEBUG_BUFFER = 10_000
SDC_TOL = 1e-10


@dataclass(frozen=True)
class Transition:
    """Observed transition (s, a, s_plus) at time t."""
    s: np.ndarray
    a: np.ndarray
    s_plus: np.ndarray
    t: int = 0


@dataclass(frozen=True)
class NoiseResidual:
    w: np.ndarray
    t: int = 0


@dataclass(frozen=True)
class IngestReport:
    residual: NoiseResidual
    hull_changed: bool
    sdc_violated: bool
    violation_magnitude: float
    W: Optional[FacetPolytope]
    hull_size: int


@dataclass(frozen=True)
class SdcConstraints:
    """Sample-based SDC: M_i v_j <= m_i for every facet i and hull vertex j."""
    vertices: np.ndarray

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    def n_rows(self, n_facets: int) -> int:
        return n_facets * self.n_vertices

    def residuals(self, W: FacetPolytope) -> np.ndarray:
        """Matrix of M_i v_j - m_i, shape (n_facets, n_vertices)."""
        if self.n_vertices == 0:
            return np.zeros((W.n_facets, 0))
        return W.M @ self.vertices.T - W.m[:, None]

    def satisfied(self, W: FacetPolytope, tol: float = SDC_TOL) -> bool:
        return bool(np.all(self.residuals(W) <= tol))

    def facet_rows(self) -> np.ndarray:
        """Rows [v_j', -1] acting on one facet's (M_i, m_i)."""
        return np.hstack([self.vertices, -np.ones((self.n_vertices, 1))])

    def matrix(self, n_facets: int):
        """Explicit (A, b) with A (M.ravel(), m) <= b, one row per (facet, vertex)."""
        n_w = self.vertices.shape[1]
        A = np.zeros((self.n_rows(n_facets), n_facets * n_w + n_facets))
        for i in range(n_facets):
            for j, v in enumerate(self.vertices):
                r = i * self.n_vertices + j
                A[r, i * n_w:(i + 1) * n_w] = v
                A[r, n_facets * n_w + i] = -1.0
        return A, np.zeros(A.shape[0])


def residual(tr: Transition, A: np.ndarray, B: np.ndarray, b: Optional[np.ndarray] = None) -> NoiseResidual:
    """w = s_plus - (A s + B a + b)."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    b = np.zeros(A.shape[0]) if b is None else np.asarray(b, dtype=float)
    s = np.asarray(tr.s, dtype=float).ravel()
    a = np.atleast_1d(np.asarray(tr.a, dtype=float)).ravel()
    s_plus = np.asarray(tr.s_plus, dtype=float).ravel()
    if s.shape[0] != A.shape[1] or s_plus.shape[0] != A.shape[0] or a.shape[0] != B.shape[1]:
        raise DimensionMismatch(
            f"transition dimensions ({s.shape[0]}, {a.shape[0]}, {s_plus.shape[0]}) "
            f"do not match the model ({A.shape[1]}, {B.shape[1]}, {A.shape[0]})")
    return NoiseResidual(w=s_plus - (A @ s + B @ a + b), t=tr.t)


def sdc_rows(hull: VertexPolytope) -> SdcConstraints:
    """The finite SDC description over the hull vertices."""
    return SdcConstraints(hull.as_array())


def initial_uncertainty_set(residuals: np.ndarray, inflation: float = 2.0,
                            min_half_width: float = 1e-6) -> FacetPolytope:
    """Axis-aligned box around the residuals, offsets inflated and kept nonnegative."""
    residuals = np.atleast_2d(np.asarray(residuals, dtype=float))
    upper = np.maximum(inflation * residuals.max(axis=0), min_half_width)
    lower = np.minimum(inflation * residuals.min(axis=0), -min_half_width)
    return FacetPolytope.box(lower, upper)


class NoiseDatastore:
    """Single-writer store of noise residuals kept as a minimal vertex hull."""

    def __init__(self, A: np.ndarray, B: np.ndarray, b: Optional[np.ndarray] = None,
                 warmup: int = WARMUP_SAMPLES, max_vertices: Optional[int] = None,
                 debug_buffer: int = DEBUG_BUFFER):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self.B = np.asarray(B, dtype=float).reshape(self.A.shape[0], -1)
        self.b = np.zeros(self.A.shape[0]) if b is None else np.asarray(b, dtype=float)
        self.warmup = warmup
        self.max_vertices = max_vertices
        self.ready = False
        self.n_samples = 0
        self._hull = VertexPolytope()
        self._debug = deque(maxlen=debug_buffer) if debug_buffer else None
        self._warned = False

    @property
    def dim(self) -> int:
        return self.A.shape[0]

    @property
    def n_vertices(self) -> int:
        return self._hull.n_vertices

    def hull(self) -> VertexPolytope:
        return self._hull.copy()

    def raw_residuals(self) -> np.ndarray:
        """Debug view of the stored raw residuals."""
        if not self._debug:
            return np.zeros((0, self.dim))
        return np.vstack(list(self._debug))

    def sdc_rows(self) -> SdcConstraints:
        return sdc_rows(self._hull)

    def ingest(self, tr: Transition, W: Optional[FacetPolytope] = None) -> IngestReport:
        """Store the residual of a transition and adapt W when the residual escapes it.

        Args:
            tr: Observed transition
            W: Current uncertainty set, or None before one exists

        Returns:
            IngestReport with the (possibly adapted) uncertainty set
        """
        res = residual(tr, self.A, self.B, self.b)
        w = res.w
        self.n_samples += 1
        if self._debug is not None:
            self._debug.append(w.copy())

        if self.ready:
            updated = hull_insert(self._hull, w, self.max_vertices)
            changed = not _same_vertices(updated, self._hull)
            self._hull = updated
        else:
            changed = not any(np.array_equal(w, v) for v in self._hull.vertices)
            if changed:
                self._hull.vertices.append(w.copy())
            if self.n_samples >= self.warmup:
                self._try_ready()

        violated, magnitude = False, 0.0
        if W is not None:
            magnitude = facet_violation(W, w)
            if magnitude > 0.0:
                violated = True
                W = sdc_adapt(W, w)
                logger.warning(f"t={tr.t}: residual {np.array2string(w, precision=5)} escaped W "
                               f"by {magnitude:.3e}, offsets relaxed")
            else:
                magnitude = 0.0
        return IngestReport(residual=res, hull_changed=changed, sdc_violated=violated,
                            violation_magnitude=magnitude, W=W, hull_size=self._hull.n_vertices)

    def _try_ready(self):
        points = self._hull.as_array(self.dim)
        if self._hull.spans(self.dim) and origin_in_hull(points):
            self._hull = _compress(self._hull)
            self.ready = True
            logger.info(f"Noise hull ready after {self.n_samples} samples, "
                        f"{self._hull.n_vertices} vertices")
        elif not self._warned:
            self._warned = True
            logger.warning(f"Origin not inside the hull of the first {self.n_samples} residuals; "
                           "storing samples without pruning")


def _same_vertices(a: VertexPolytope, b: VertexPolytope) -> bool:
    if a.n_vertices != b.n_vertices:
        return False
    return all(np.array_equal(u, v) for u, v in zip(a.vertices, b.vertices))


def _compress(hull: VertexPolytope) -> VertexPolytope:
    """Drop every point that is a convex combination of the remaining ones."""
    kept = [v.copy() for v in hull.vertices]
    index = 0
    while index < len(kept):
        others = kept[:index] + kept[index + 1:]
        if others and in_convex_hull(kept[index], np.vstack(others)):
            kept.pop(index)
        else:
            index += 1
    return VertexPolytope(kept)
