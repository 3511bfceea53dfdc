"""
Tests for facet and vertex polytopes, support LPs and hull maintenance.
"""

import unittest
from pathlib import Path

import numpy as np
from hypothesis import given, settings, strategies as st

import sys
sys.path.insert(0, str(Path(__file__).parent.parent))

from safe_rl.errors import DimensionMismatch, Infeasible, Unbounded
from safe_rl.polytope import (FacetPolytope, VertexPolytope, chebyshev_center, facet_violation,
                              hull_insert, hull_membership, in_convex_hull, origin_in_hull,
                              polygon_area, sdc_adapt, support, support_many, vertices)

SQUARE = [np.array(v, dtype=float) for v in ([1, 1], [-1, 1], [1, -1], [-1, -1])]


def contains_vertex(hull: VertexPolytope, point) -> bool:
    return any(np.allclose(v, point) for v in hull.vertices)


class TestFacetPolytope(unittest.TestCase):
    """Facet form, support values and geometry helpers."""

    def setUp(self):
        self.box = FacetPolytope.box([-1.0, -1.0], [1.0, 1.0])

    def test_box_layout(self):
        np.testing.assert_allclose(self.box.M, np.vstack([np.eye(2), -np.eye(2)]))
        np.testing.assert_allclose(self.box.m, np.ones(4))
        self.assertEqual(self.box.n_facets, 4)
        self.assertEqual(self.box.dim, 2)

    def test_shape_mismatch(self):
        with self.assertRaises(DimensionMismatch):
            FacetPolytope(np.eye(2), np.ones(3))

    def test_support_value_and_multipliers(self):
        sv = support(self.box, np.array([1.0, 1.0]))
        self.assertAlmostEqual(sv.value, 2.0, places=10)
        np.testing.assert_allclose(sv.multipliers, [1.0, 1.0, 0.0, 0.0], atol=1e-10)
        np.testing.assert_allclose(sv.maximizer, [1.0, 1.0], atol=1e-10)

    def test_support_gradient_matches_finite_differences(self):
        P = FacetPolytope(np.array([[1.0, 0.2], [-0.3, 1.0], [-1.0, -0.1], [0.1, -1.0]]),
                          np.array([1.0, 0.8, 1.2, 0.9]))
        direction = np.array([0.7, 0.4])
        sv = support(P, direction)
        h = 1e-6
        for i in range(P.n_facets):
            up, down = P.m.copy(), P.m.copy()
            up[i] += h
            down[i] -= h
            fd = (support(FacetPolytope(P.M, up), direction).value
                  - support(FacetPolytope(P.M, down), direction).value) / (2 * h)
            self.assertAlmostEqual(sv.multipliers[i], fd, places=5)

    def test_support_matches_vertex_maximum(self):
        rng = np.random.default_rng(11)
        angles = np.sort(rng.uniform(0, 2 * np.pi, size=7))
        normals = np.column_stack([np.cos(angles), np.sin(angles)])
        P = FacetPolytope(np.vstack([normals, np.eye(2), -np.eye(2)]),
                          np.concatenate([rng.uniform(0.5, 1.5, size=7), 2.0 * np.ones(4)]))
        corners = vertices(P)
        for direction in rng.normal(size=(20, 2)):
            self.assertAlmostEqual(support(P, direction).value, float(np.max(corners @ direction)), places=9)

    def test_support_many_matches_single(self):
        directions = np.array([[1.0, 0.0], [1.0, 0.1], [0.0, -1.0]])
        values = [sv.value for sv in support_many(self.box, directions)]
        np.testing.assert_allclose(values, [1.0, 1.1, 1.0], atol=1e-10)

    def test_unbounded_direction(self):
        halfplane = FacetPolytope(np.array([[1.0, 0.0]]), np.array([1.0]))
        with self.assertRaises(Unbounded):
            support(halfplane, np.array([0.0, 1.0]))
        self.assertFalse(halfplane.is_bounded())
        self.assertTrue(self.box.is_bounded())

    def test_empty_polytope(self):
        empty = FacetPolytope(np.array([[1.0], [-1.0]]), np.array([-1.0, -1.0]))
        with self.assertRaises(Infeasible):
            support(empty, np.array([1.0]))

    def test_validate_requires_origin(self):
        shifted = FacetPolytope.box([0.5, 0.5], [1.0, 1.0])
        shifted.validate()
        with self.assertRaises(ValueError):
            shifted.validate(require_origin=True)

    def test_contains_and_adapt(self):
        outside = np.array([1.5, 0.0])
        self.assertFalse(self.box.contains(outside))
        self.assertAlmostEqual(facet_violation(self.box, outside), 0.5)
        adapted = sdc_adapt(self.box, outside)
        self.assertTrue(adapted.contains(outside))
        np.testing.assert_allclose(adapted.m, [1.5, 1.0, 1.0, 1.0])

    def test_serialization(self):
        again = FacetPolytope.from_dict(self.box.to_dict())
        np.testing.assert_array_equal(again.M, self.box.M)
        np.testing.assert_array_equal(again.m, self.box.m)

    def test_geometry_helpers(self):
        center, radius = chebyshev_center(self.box)
        np.testing.assert_allclose(center, [0.0, 0.0], atol=1e-10)
        self.assertAlmostEqual(radius, 1.0, places=10)
        corners = vertices(self.box)
        self.assertEqual(corners.shape, (4, 2))
        self.assertAlmostEqual(polygon_area(corners), 4.0, places=10)
        self.assertEqual(polygon_area(np.zeros((1, 2))), 0.0)


class TestVertexHull(unittest.TestCase):
    """Hull membership via the nonnegative-combination LP and eager pruning."""

    def setUp(self):
        self.square = VertexPolytope([v.copy() for v in SQUARE])

    def test_membership(self):
        inside, zeta = hull_membership(np.array([0.5, 0.0]), self.square)
        self.assertTrue(inside)
        self.assertAlmostEqual(zeta, 0.5, places=9)
        inside, zeta = hull_membership(np.array([2.0, 0.0]), self.square)
        self.assertFalse(inside)
        self.assertAlmostEqual(zeta, 2.0, places=9)

    def test_membership_needs_spanning_hull(self):
        flat = VertexPolytope([np.array([1.0, 0.0]), np.array([-1.0, 0.0])])
        with self.assertRaises(Infeasible):
            hull_membership(np.array([0.0, 0.5]), flat)

    def test_insert_new_extreme_point(self):
        hull = hull_insert(self.square, np.array([2.0, 0.0]))
        self.assertEqual(hull.n_vertices, 5)
        self.assertTrue(contains_vertex(hull, [2.0, 0.0]))
        self.assertTrue(contains_vertex(hull, [1.0, 1.0]))
        self.assertTrue(contains_vertex(hull, [1.0, -1.0]))

    def test_insert_prunes_interior_vertex(self):
        hull = hull_insert(self.square, np.array([3.0, 3.0]))
        self.assertFalse(contains_vertex(hull, [1.0, 1.0]))
        self.assertTrue(contains_vertex(hull, [3.0, 3.0]))
        self.assertEqual(hull.n_vertices, 4)

    def test_insert_interior_point_is_noop(self):
        hull = hull_insert(self.square, np.array([0.2, -0.3]))
        self.assertEqual(hull.n_vertices, 4)
        # the input is never modified
        self.assertEqual(self.square.n_vertices, 4)

    def test_vertex_cap(self):
        hull = hull_insert(self.square, np.array([2.0, 0.0]), max_vertices=4)
        self.assertEqual(hull.n_vertices, 4)

    def test_convex_hull_feasibility(self):
        points = np.vstack(SQUARE)
        self.assertTrue(in_convex_hull(np.array([0.9, -0.9]), points))
        self.assertFalse(in_convex_hull(np.array([1.1, 0.0]), points))
        self.assertTrue(origin_in_hull(points))
        self.assertFalse(origin_in_hull(points + 2.0))

    @settings(max_examples=25, deadline=None)
    @given(x=st.floats(-2.0, 2.0), y=st.floats(-2.0, 2.0), scale=st.floats(0.1, 10.0))
    def test_membership_value_is_homogeneous(self, x, y, scale):
        point = np.array([x, y])
        _, zeta = hull_membership(point, self.square)
        _, scaled = hull_membership(scale * point, self.square)
        self.assertAlmostEqual(scaled, scale * zeta, delta=1e-8 * max(1.0, scale * zeta))

    @settings(max_examples=20, deadline=None)
    @given(index=st.integers(0, 3))
    def test_reinserting_a_vertex_is_idempotent(self, index):
        hull = hull_insert(self.square, SQUARE[index].copy())
        self.assertEqual(hull.n_vertices, 4)
        for v in SQUARE:
            self.assertTrue(contains_vertex(hull, v))


if __name__ == '__main__':
    unittest.main()
