"""
Polytope representations for the uncertainty set and the noise sample hull.

FacetPolytope is the learnable set {w | M w <= m}; VertexPolytope is the
convex hull of the observed residuals, kept in vertex form only. All hull
queries go through the nonnegative-combination LP.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import nnls
from scipy.spatial import ConvexHull, HalfspaceIntersection

try:
    from scipy.spatial import QhullError
except ImportError:  # scipy < 1.8
    from scipy.spatial.qhull import QhullError

from .errors import DimensionMismatch, Infeasible, Unbounded
from .solver import QpProblem, SolveResult, solve

logger = logging.getLogger(__name__)

MEMBERSHIP_TOL = 1e-9
VERTEX_FORM_MAX_DIM = 3
ACTIVE_TOL = 1e-9


@dataclass
class FacetPolytope:
    """Polytope {w | M w <= m}."""
    M: np.ndarray
    m: np.ndarray

    def __post_init__(self):
        self.M = np.atleast_2d(np.asarray(self.M, dtype=float))
        self.m = np.atleast_1d(np.asarray(self.m, dtype=float))
        if self.M.shape[0] != self.m.shape[0]:
            raise DimensionMismatch(f"M has {self.M.shape[0]} rows but m has {self.m.shape[0]} entries")

    @classmethod
    def box(cls, lower: Sequence[float], upper: Sequence[float]) -> "FacetPolytope":
        """Axis-aligned box lower <= w <= upper, rows ordered [+e_i; -e_i]."""
        lower = np.asarray(lower, dtype=float)
        upper = np.asarray(upper, dtype=float)
        n = lower.shape[0]
        return cls(np.vstack([np.eye(n), -np.eye(n)]), np.concatenate([upper, -lower]))

    @property
    def n_facets(self) -> int:
        return self.M.shape[0]

    @property
    def dim(self) -> int:
        return self.M.shape[1]

    def copy(self) -> "FacetPolytope":
        return FacetPolytope(self.M.copy(), self.m.copy())

    def scaled(self, factor: float) -> "FacetPolytope":
        return FacetPolytope(self.M.copy(), self.m * factor)

    def contains(self, w: np.ndarray, tol: float = 1e-10) -> bool:
        return facet_violation(self, w) <= tol

    def is_bounded(self) -> bool:
        """Finite support along every +/- coordinate direction."""
        if self.n_facets < self.dim + 1:
            return False
        try:
            for direction in np.vstack([np.eye(self.dim), -np.eye(self.dim)]):
                support(self, direction)
        except Unbounded:
            return False
        return True

    def validate(self, require_origin: bool = False):
        """Check boundedness (and origin membership when required).

        Raises:
            Unbounded: if the set is unbounded
            ValueError: if the origin is required but some offset is negative
        """
        if not self.is_bounded():
            raise Unbounded(f"facet polytope with {self.n_facets} facets is unbounded")
        if require_origin and np.any(self.m < 0):
            raise ValueError("origin required inside the set but some offsets are negative")

    def to_dict(self) -> Dict[str, Any]:
        return {"M": self.M.tolist(), "m": self.m.tolist()}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "FacetPolytope":
        return cls(np.array(data["M"], dtype=float), np.array(data["m"], dtype=float))


@dataclass
class VertexPolytope:
    """Convex hull kept as an ordered list of vertices (insertion order)."""
    vertices: List[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.vertices = [np.atleast_1d(np.asarray(v, dtype=float)) for v in self.vertices]

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def as_array(self, dim: Optional[int] = None) -> np.ndarray:
        if not self.vertices:
            return np.zeros((0, dim or 0))
        return np.vstack(self.vertices)

    def spans(self, dim: int) -> bool:
        """True if the vertices linearly span R^dim."""
        if self.n_vertices < dim:
            return False
        return int(np.linalg.matrix_rank(self.as_array())) == dim

    def copy(self) -> "VertexPolytope":
        return VertexPolytope([v.copy() for v in self.vertices])

    def to_dict(self) -> Dict[str, Any]:
        return {"vertices": [v.tolist() for v in self.vertices]}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "VertexPolytope":
        return cls([np.array(v, dtype=float) for v in data["vertices"]])


@dataclass(frozen=True)
class SupportValue:
    """Support function value with the LP data needed for sensitivities.

    d value / d m_i = multipliers[i], d value / d M_ij = -multipliers[i] * maximizer[j].
    """
    value: float
    multipliers: np.ndarray
    maximizer: np.ndarray
    active_set: Tuple[int, ...]
    strict_complementarity: bool


def support(P: FacetPolytope,
            direction: np.ndarray,
            warm_start: Optional[Sequence[int]] = None) -> SupportValue:
    """Support function max_{M w <= m} direction . w.

    Args:
        P: Facet polytope
        direction: Direction vector
        warm_start: Active set of a previous, nearby support LP

    Returns:
        SupportValue

    Raises:
        Unbounded: if P is unbounded along the direction
        Infeasible: if P is empty
    """
    direction = np.asarray(direction, dtype=float).ravel()
    if direction.shape[0] != P.dim:
        raise DimensionMismatch(f"direction has {direction.shape[0]} entries, polytope dimension {P.dim}")
    lp = QpProblem.lp(-direction, A_in=P.M, b_in=P.m)
    res = solve(lp, warm_start=warm_start)
    if warm_start is not None and not res.strict_complementarity:
        res = solve(lp)
    return _support_value(res)


def _support_value(res: SolveResult) -> SupportValue:
    return SupportValue(
        value=-res.objective,
        multipliers=res.mu_in.copy(),
        maximizer=res.y_star.copy(),
        active_set=res.active_set,
        strict_complementarity=res.strict_complementarity,
    )


def support_many(P: FacetPolytope, directions: np.ndarray) -> List[SupportValue]:
    """Support values for a sequence of directions, warm-starting each LP."""
    values = []
    previous = None
    for direction in np.atleast_2d(directions):
        value = support(P, direction, warm_start=previous)
        previous = value.active_set
        values.append(value)
    return values


def facet_violation(P: FacetPolytope, w: np.ndarray) -> float:
    """Maximum facet residual max_i (M_i w - m_i); <= 0 means w is in P."""
    return float(np.max(P.M @ np.asarray(w, dtype=float) - P.m))


def sdc_adapt(P: FacetPolytope, w: np.ndarray) -> FacetPolytope:
    """Relax offsets to m_i = max(m_i, M_i w) so that P contains w."""
    return FacetPolytope(P.M.copy(), np.maximum(P.m, P.M @ np.asarray(w, dtype=float)))


def _zeta(point: np.ndarray, vertices: np.ndarray) -> float:
    """min sum(z) s.t. vertices' z = point, z >= 0; inf when infeasible."""
    n_v = vertices.shape[0]
    if n_v == 0:
        return 0.0 if np.allclose(point, 0.0) else np.inf
    lp = QpProblem.lp(np.ones(n_v), A_in=-np.eye(n_v), b_in=np.zeros(n_v),
                      A_eq=vertices.T, b_eq=point)
    try:
        return solve(lp).objective
    except Infeasible:
        return np.inf


def hull_membership(point: np.ndarray, hull: VertexPolytope) -> Tuple[bool, float]:
    """Membership test via the nonnegative-combination LP.

    Assumes the origin lies in the hull; zeta is then the gauge of the hull.

    Returns:
        Tuple of (inside, zeta)

    Raises:
        Infeasible: if the hull does not span the space
    """
    point = np.atleast_1d(np.asarray(point, dtype=float))
    dim = point.shape[0]
    if not hull.spans(dim):
        raise Infeasible(f"hull with {hull.n_vertices} vertices does not span R^{dim}")
    zeta = _zeta(point, hull.as_array())
    if not np.isfinite(zeta):
        raise Infeasible("point not in the cone of the hull; origin outside the hull")
    return zeta <= 1.0 + MEMBERSHIP_TOL, zeta


def hull_insert(hull: VertexPolytope, w: np.ndarray,
                max_vertices: Optional[int] = None) -> VertexPolytope:
    """Insert a point and eagerly prune vertices that became interior.

    Args:
        hull: Current hull (origin inside)
        w: New point
        max_vertices: Optional cap; evicts the vertex closest to the hull of the others

    Returns:
        Updated VertexPolytope (the input is not modified)
    """
    w = np.atleast_1d(np.asarray(w, dtype=float))
    if hull.n_vertices and _zeta(w, hull.as_array()) <= 1.0 + MEMBERSHIP_TOL:
        return hull.copy()

    kept = [v.copy() for v in hull.vertices] + [w]
    index = 0
    # candidates are the pre-existing vertices, tested in insertion order
    while index < len(kept) - 1:
        others = np.vstack(kept[:index] + kept[index + 1:])
        if _zeta(kept[index], others) <= 1.0 + MEMBERSHIP_TOL:
            logger.debug(f"Pruned hull vertex {kept[index].tolist()}")
            kept.pop(index)
        else:
            index += 1

    while max_vertices is not None and len(kept) > max_vertices:
        excess = []
        for i in range(len(kept)):
            others = np.vstack(kept[:i] + kept[i + 1:])
            excess.append(_zeta(kept[i], others) - 1.0)
        evict = int(np.argmin(excess))
        logger.warning(f"Hull vertex cap {max_vertices} reached, evicting {kept[evict].tolist()}")
        kept.pop(evict)

    return VertexPolytope(kept)


def in_convex_hull(point: np.ndarray, points: np.ndarray) -> bool:
    """Feasibility LP: exists z >= 0, sum z = 1, points' z = point."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    n_v = points.shape[0]
    if n_v == 0 or points.shape[1] == 0:
        return False
    A_eq = np.vstack([points.T, np.ones((1, n_v))])
    b_eq = np.append(np.asarray(point, dtype=float), 1.0)
    lp = QpProblem.lp(np.zeros(n_v), A_in=-np.eye(n_v), b_in=np.zeros(n_v), A_eq=A_eq, b_eq=b_eq)
    try:
        solve(lp)
    except Infeasible:
        return False
    return True


def origin_in_hull(points: np.ndarray) -> bool:
    """True if the origin is a convex combination of the points."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    return in_convex_hull(np.zeros(points.shape[1]), points)


def chebyshev_center(P: FacetPolytope) -> Tuple[np.ndarray, float]:
    """Center and radius of the largest ball inside P."""
    norms = np.linalg.norm(P.M, axis=1)
    n = P.dim
    c = np.zeros(n + 1)
    c[-1] = -1.0
    A_in = np.vstack([np.hstack([P.M, norms[:, None]]), np.append(np.zeros(n), -1.0)])
    b_in = np.append(P.m, 0.0)
    res = solve(QpProblem.lp(c, A_in=A_in, b_in=b_in))
    return res.y_star[:n], float(res.y_star[-1])


def vertices(P: FacetPolytope) -> np.ndarray:
    """Vertices of a bounded facet polytope (counter-clockwise in 2-D).

    Raises:
        Infeasible: if P is empty
    """
    center, radius = chebyshev_center(P)
    if radius <= 1e-12:
        return center.reshape(1, -1)
    halfspaces = np.hstack([P.M, -P.m[:, None]])
    points = HalfspaceIntersection(halfspaces, center).intersections
    try:
        return points[ConvexHull(points).vertices]
    except (QhullError, ValueError):
        return np.unique(np.round(points, 12), axis=0)


def vertex_form(P: FacetPolytope) -> Optional[np.ndarray]:
    """Vertices of P for support queries by enumeration, or None.

    None is returned outside dimensions 2..VERTEX_FORM_MAX_DIM, for unbounded
    or flat sets and when qhull fails; callers then fall back to support LPs.

    Raises:
        Infeasible: if P is empty
    """
    n = P.dim
    if not 2 <= n <= VERTEX_FORM_MAX_DIM or P.n_facets <= n:
        return None
    norms = np.linalg.norm(P.M, axis=1)
    if np.any(norms <= 1e-14):
        return None
    # bounded iff the origin is interior to the hull of the unit normals
    try:
        normals = ConvexHull(P.M / norms[:, None])
    except (QhullError, ValueError):
        return None
    if np.any(normals.equations[:, -1] >= -1e-12):
        return None

    center, radius = chebyshev_center(P)
    if radius <= 1e-9 * max(1.0, float(np.max(np.abs(center)))):
        return None
    try:
        points = HalfspaceIntersection(np.hstack([P.M, -P.m[:, None]]), center).intersections
    except (QhullError, ValueError):
        return None
    if points.shape[0] == 0 or not np.all(np.isfinite(points)):
        return None
    return points


def vertex_support(P: FacetPolytope, points: np.ndarray, directions: np.ndarray
                   ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Support values, multipliers and maximizers over the vertices of P.

    The multipliers solve direction = M_A' mu, mu >= 0 on the facets A active
    at the maximizing vertex, which are the support LP multipliers.

    Args:
        P: Facet polytope
        points: Its vertices (see vertex_form)
        directions: One direction per row

    Returns:
        Tuple of (values (n_d,), multipliers (n_d, n_facets), maximizers (n_d, dim))
    """
    directions = np.atleast_2d(np.asarray(directions, dtype=float))
    scores = directions @ points.T
    best = np.argmax(scores, axis=1)
    values = scores[np.arange(directions.shape[0]), best]
    multipliers = np.zeros((directions.shape[0], P.n_facets))

    for v in np.unique(best):
        members = np.flatnonzero(best == v)
        residual = P.M @ points[v] - P.m
        active = np.flatnonzero(residual >= -ACTIVE_TOL * np.maximum(1.0, np.abs(P.m)))
        normals = P.M[active].T
        # simple vertex: one linear solve for every direction it maximizes
        if active.size == P.dim and abs(np.linalg.det(normals)) > 1e-12:
            mu = np.linalg.solve(normals, directions[members].T).T
            if np.all(mu >= -1e-10):
                multipliers[np.ix_(members, active)] = np.maximum(mu, 0.0)
                continue
        for k in members:
            multipliers[k, active] = nnls(normals, directions[k])[0]
    return values, multipliers, points[best].copy()


def polygon_area(points: np.ndarray) -> float:
    """Area (volume in n-D) of the convex hull of the points; 0 if degenerate."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if points.shape[0] <= points.shape[1]:
        return 0.0
    try:
        return float(ConvexHull(points).volume)
    except (QhullError, ValueError):
        return 0.0
