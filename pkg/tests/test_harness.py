#!/usr/bin/env python3
"""
Tests for the experiment building blocks: LQR design, octagon noise and the reference schedule
"""

import sys
import unittest
from pathlib import Path

import numpy as np
from scipy import linalg as la

sys.path.insert(0, str(Path(__file__).parent.parent))

from harness.lqr import lqr_design, riccati_residual
from harness.noise import octagon_facets, octagon_sampler, octagon_vertices
from harness.reference import reference, reference_point
from safe_rl.errors import NotStabilizable
from safe_rl.tightening import spectral_radius


class TestLqrDesign(unittest.TestCase):
    def test_scalar_golden_ratio(self):
        P, K = lqr_design([[1.0]], [[1.0]], [[1.0]], [[1.0]])
        golden = (1.0 + np.sqrt(5.0)) / 2.0
        self.assertAlmostEqual(P[0, 0], golden, places=9)
        self.assertAlmostEqual(K[0, 0], golden / (1.0 + golden), places=9)

    def test_matches_scipy_riccati(self):
        A = np.array([[1.0, 0.1], [0.0, 1.0]])
        B = np.array([[0.05], [0.1]])
        Q = np.diag([1.0, 0.01])
        R = np.array([[0.01]])
        P, K = lqr_design(A, B, Q, R)
        np.testing.assert_allclose(P, la.solve_discrete_are(A, B, Q, R), rtol=1e-8)
        self.assertLess(riccati_residual(A, B, Q, R, P), 1e-9)
        self.assertLess(spectral_radius(A - B @ K), 1.0)

    def test_unstabilizable(self):
        with self.assertRaises(NotStabilizable):
            lqr_design([[2.0]], [[0.0]], [[1.0]], [[1.0]])


class TestOctagonNoise(unittest.TestCase):
    def test_vertices_lie_on_circle(self):
        corners = octagon_vertices(0.5)
        self.assertEqual(corners.shape, (8, 2))
        np.testing.assert_allclose(np.linalg.norm(corners, axis=1), 0.5)

    def test_facets_touch_vertices(self):
        W = octagon_facets(0.5)
        for v in octagon_vertices(0.5):
            slack = W.m - W.M @ v
            self.assertGreaterEqual(slack.min(), -1e-12)
            self.assertEqual(int(np.sum(np.abs(slack) < 1e-12)), 2)

    def test_samples_inside(self):
        rng = np.random.default_rng(11)
        samples = octagon_sampler(0.02, rng, size=500)
        self.assertEqual(samples.shape, (500, 2))
        W = octagon_facets(0.02)
        self.assertTrue(all(W.contains(w, tol=1e-12) for w in samples))
        # spread over the whole octagon
        self.assertGreater(samples[:, 0].max(), 0.01)
        self.assertLess(samples[:, 0].min(), -0.01)

    def test_single_sample_shape(self):
        self.assertEqual(octagon_sampler(0.1, np.random.default_rng(0)).shape, (2,))

    def test_zero_radius(self):
        np.testing.assert_array_equal(octagon_sampler(0.0, np.random.default_rng(0), size=3), np.zeros((3, 2)))

    def test_negative_radius(self):
        with self.assertRaises(ValueError):
            octagon_sampler(-0.1, np.random.default_rng(0))


class TestReference(unittest.TestCase):
    def test_step_schedule(self):
        self.assertEqual(reference(0), (-1.0, 0.0, 0.0))
        self.assertEqual(reference(24)[0], -1.0)
        self.assertEqual(reference(25)[0], 1.0)
        self.assertEqual(reference(120)[0], 1.0)
        self.assertEqual(reference(121)[0], -1.0)

    def test_custom_schedule(self):
        self.assertEqual(reference(5, start=5, end=6, low=0.0, high=0.5)[0], 0.5)

    def test_negative_time(self):
        with self.assertRaises(ValueError):
            reference(-1)

    def test_reference_point(self):
        ref = reference_point(30)
        np.testing.assert_array_equal(ref.state, [1.0, 0.0])
        np.testing.assert_array_equal(ref.action, [0.0])
        np.testing.assert_array_equal(ref.xi, [1.0, 0.0, 0.0])


if __name__ == '__main__':
    unittest.main()
