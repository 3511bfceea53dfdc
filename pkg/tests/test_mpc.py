"""
Tests for the robust MPC: parameter layout, QP construction, policy and gradients.
"""

import unittest
from dataclasses import replace
from pathlib import Path
from unittest import mock

import numpy as np

import sys
sys.path.insert(0, str(Path(__file__).parent.parent))

from harness.episode import constraint_rows
from harness.lqr import lqr_design
from safe_rl.errors import DimensionMismatch, Infeasible, NotFinitelyDetermined, WeakActivation
from safe_rl.mpc import (ROW_INPUT, ROW_STATE, ROW_TERMINAL, MpcParams, Reference, ThetaSelection,
                         build_qp, eval_q, eval_v_policy, explore_action, make_profile, stage_cost)
from safe_rl.polytope import FacetPolytope
from safe_rl.solver import solve
from safe_rl.tightening import tighten_pipeline


def double_integrator(N: int = 5, half_width: float = 0.02, rotation: float = 0.0) -> MpcParams:
    A = np.array([[1.0, 0.1], [0.0, 1.0]])
    B = np.array([[0.05], [0.1]])
    C, D, c_bar = constraint_rows([-1.0, -1.0], [1.0, 1.0], [-10.0], [10.0])
    H = np.diag([1.0, 0.01, 0.01])
    P, K = lqr_design(A, B, H[:2, :2], H[2:, 2:])
    W = FacetPolytope.box([-half_width, -half_width], [half_width, half_width])
    if rotation:
        turn = np.array([[np.cos(rotation), -np.sin(rotation)], [np.sin(rotation), np.cos(rotation)]])
        W = FacetPolytope(W.M @ turn.T, W.m)
    return MpcParams.from_matrices(H, P, A, B, C, D, c_bar, K, W, gamma=0.99, N=N)


def scalar_system(N: int = 1) -> MpcParams:
    C, D, c_bar = constraint_rows([-1.0], [1.0], [-1.0], [1.0])
    W = FacetPolytope.box([-0.01], [0.01])
    return MpcParams.from_matrices(np.eye(2), np.eye(1), [[1.0]], [[1.0]], C, D, c_bar, [[0.5]], W,
                                   gamma=0.9, N=N)


def finite_difference(fun, theta, h=1e-6):
    grad = np.zeros(theta.size)
    for e in range(theta.size):
        up, down = theta.copy(), theta.copy()
        up[e] += h
        down[e] -= h
        grad[e] = (fun(up) - fun(down)) / (2 * h)
    return grad


class TestParameterLayout(unittest.TestCase):
    """MpcParams and the learnable parameter vector."""

    def setUp(self):
        self.params = double_integrator()

    def test_default_penalty_weight(self):
        self.assertAlmostEqual(self.params.rho, 1e3, places=9)

    def test_cost_matrices_from_factors(self):
        np.testing.assert_allclose(self.params.H, np.diag([1.0, 0.01, 0.01]), atol=1e-12)
        self.assertTrue(np.all(np.linalg.eigvalsh(self.params.P) > 0))

    def test_copy_is_independent(self):
        clone = self.params.copy()
        clone.W.m[0] = 5.0
        self.assertNotEqual(self.params.W.m[0], 5.0)

    def test_validate_shapes(self):
        with self.assertRaises(DimensionMismatch):
            MpcParams.from_matrices(np.eye(3), np.eye(2), self.params.A, self.params.B,
                                    self.params.C, self.params.D, self.params.c_bar[:-1],
                                    self.params.K, self.params.W)

    def test_selection_order_and_size(self):
        selection = ThetaSelection(("m", "K", "M"))
        self.assertEqual(selection.blocks, ("K", "M", "m"))
        self.assertEqual(selection.profile_blocks, ("K", "M", "m"))
        self.assertEqual(selection.size(self.params), 2 + 8 + 4)
        slices = selection.slices(self.params)
        self.assertEqual(slices["m"], slice(10, 14))

    def test_unknown_block(self):
        with self.assertRaises(ValueError):
            ThetaSelection(("A",))

    def test_vector_apply_roundtrip(self):
        selection = ThetaSelection(("H", "P", "M", "m"))
        theta = selection.vector(self.params)
        again = selection.apply(self.params, theta)
        np.testing.assert_allclose(again.H, self.params.H, atol=1e-14)
        np.testing.assert_allclose(again.P, self.params.P, atol=1e-12)
        np.testing.assert_array_equal(again.W.M, self.params.W.M)

    def test_apply_changes_only_selected_entries(self):
        selection = ThetaSelection(("m",))
        updated = selection.apply(self.params, np.full(4, 0.05))
        np.testing.assert_allclose(updated.W.m, np.full(4, 0.05))
        np.testing.assert_allclose(self.params.W.m, np.full(4, 0.02))

    def test_stage_cost(self):
        ref = Reference(np.array([1.0, 0.0]), np.zeros(1))
        cost = stage_cost(self.params.H, np.array([0.0, 1.0]), np.array([2.0]), ref)
        self.assertAlmostEqual(cost, 1.0 + 0.01 + 0.04)


class TestPolicy(unittest.TestCase):
    """Values, actions and exact-penalty behavior."""

    def setUp(self):
        self.params = double_integrator()
        self.profile = make_profile(self.params)

    def test_scalar_instance_matches_grid_search(self):
        params = scalar_system()
        profile = make_profile(params)
        s = 0.5
        ev = eval_v_policy(params, profile, np.array([s]))
        grid = np.linspace(-1.0, 1.0, 200001)
        x1 = s + grid
        feasible = np.all(np.outer(x1, profile.G[:, 0]) + profile.g <= 0.0, axis=1)
        costs = s ** 2 + grid ** 2 + params.gamma * x1 ** 2
        self.assertAlmostEqual(ev.V, float(np.min(costs[feasible])), places=6)
        self.assertAlmostEqual(ev.action[0], -params.gamma * s / (1 + params.gamma), places=6)

    def test_policy_is_safe_and_unrelaxed(self):
        ev = eval_v_policy(self.params, self.profile, np.array([0.5, -0.3]))
        self.assertLessEqual(ev.slack_total, 1e-10)
        self.assertTrue(ev.feasible_unrelaxed)
        self.assertTrue(-10.0 <= ev.action[0] <= 10.0)
        self.assertEqual(ev.predicted_states.shape, (self.params.N + 1, 2))
        np.testing.assert_allclose(ev.predicted_states[0], [0.5, -0.3])

    def test_q_at_policy_action_equals_v(self):
        s = np.array([0.2, 0.4])
        ev = eval_v_policy(self.params, self.profile, s)
        q = eval_q(self.params, self.profile, s, ev.action)
        self.assertAlmostEqual(q.Q, ev.V, places=8)
        other = eval_q(self.params, self.profile, s, ev.action + 1.0)
        self.assertGreater(other.Q, ev.V)

    def test_condensed_and_sparse_agree(self):
        s = np.array([0.9, 0.6])
        ref = Reference(np.array([1.0, 0.0]), np.zeros(1))
        dense = eval_v_policy(self.params, self.profile, s, ref, condensed=True)
        sparse = eval_v_policy(self.params, self.profile, s, ref, condensed=False)
        self.assertAlmostEqual(dense.V, sparse.V, places=8)
        np.testing.assert_allclose(dense.action, sparse.action, atol=1e-8)

    def test_warm_start_matches_cold(self):
        s = np.array([0.9, 0.6])
        cold = eval_v_policy(self.params, self.profile, s)
        warm = eval_v_policy(self.params, self.profile, s, warm_start=cold.solve.active_set)
        self.assertAlmostEqual(cold.V, warm.V, places=10)

    def test_relaxed_matches_unrelaxed_when_feasible(self):
        s = np.array([0.95, 0.8])
        ev = eval_v_policy(self.params, self.profile, s)
        qp, layout = build_qp(self.params, self.profile, s, relaxed=False)
        exact = solve(qp)
        np.testing.assert_allclose(ev.predicted_actions, layout.actions(exact.y_star), atol=1e-8)
        self.assertLessEqual(ev.slack_total, 1e-8)

    def test_infeasible_state_uses_slack(self):
        ev = eval_v_policy(self.params, self.profile, np.array([0.99, 5.0]))
        self.assertFalse(ev.feasible_unrelaxed)
        self.assertGreater(ev.slack_total, 0.0)

    def test_row_bookkeeping(self):
        qp, layout = build_qp(self.params, self.profile, np.zeros(2))
        n_state_rows = (self.params.N - 1) * 4
        self.assertEqual(int(np.sum(layout.row_kind == ROW_STATE)), n_state_rows)
        self.assertEqual(int(np.sum(layout.row_kind == ROW_INPUT)), self.params.N * 2)
        self.assertEqual(int(np.sum(layout.row_kind == ROW_TERMINAL)), self.profile.G.shape[0])
        self.assertEqual(layout.sigma.stop - layout.sigma.start, n_state_rows + self.profile.G.shape[0])

    def test_wrong_state_size(self):
        with self.assertRaises(DimensionMismatch):
            build_qp(self.params, self.profile, np.zeros(3))

    def test_proximity_exploration_returns_safe_target(self):
        params = scalar_system()
        ev = explore_action(params, make_profile(params), np.array([0.5]), np.array([0.1]),
                            mode="proximity", proximity_weight=1e4)
        self.assertAlmostEqual(ev.action[0], 0.1, places=6)

    def test_linear_exploration_respects_input_bounds(self):
        ev = explore_action(self.params, self.profile, np.zeros(2), np.array([500.0]))
        self.assertGreaterEqual(ev.action[0], -10.0 - 1e-9)
        greedy = eval_v_policy(self.params, self.profile, np.zeros(2))
        self.assertLess(ev.action[0], greedy.action[0])


class TestGradients(unittest.TestCase):
    """Parametric gradients of V against central differences."""

    def setUp(self):
        # facet normals off the constraint directions keep support maximizers unique
        self.params = double_integrator(rotation=0.3)
        self.s = np.array([0.95, 0.8])
        self.ref = Reference(np.array([1.0, 0.0]), np.zeros(1))

    def check_gradient(self, blocks, h=1e-6, rtol=1e-5, atol=1e-6):
        selection = ThetaSelection(blocks)
        profile = make_profile(self.params, selection.profile_blocks)
        try:
            ev = eval_v_policy(self.params, profile, self.s, self.ref, selection=selection)
        except WeakActivation:
            self.skipTest("weakly active constraint at the test point")
        theta = selection.vector(self.params)

        def value(th):
            candidate = selection.apply(self.params, th)
            return eval_v_policy(candidate, make_profile(candidate), self.s, self.ref).V

        fd = finite_difference(value, theta, h)
        np.testing.assert_allclose(ev.grad_V, fd, rtol=rtol, atol=atol)

    def test_offset_gradient(self):
        self.check_gradient(("m",))

    def test_facet_gradient(self):
        self.check_gradient(("M",))

    def test_cost_gradient(self):
        # V is quadratic in the Cholesky factors; below h = 1e-5 roundoff exceeds atol
        self.check_gradient(("H", "h", "P", "p"), h=1e-4)

    def test_constraint_gradient(self):
        self.check_gradient(("c_bar",))

    def test_feedback_gain_gradient(self):
        # K enters only through the tightening, whose K block is itself a central difference
        self.check_gradient(("K",), h=1e-4, rtol=1e-4, atol=1e-5)


class TestRegularity(unittest.TestCase):
    """Constraint qualification of the relaxed QP and the gamma = 0 limit."""

    def setUp(self):
        base = double_integrator()
        # second copy of the upper position bound
        C = np.vstack([base.C, base.C[:1]])
        D = np.vstack([base.D, base.D[:1]])
        c_bar = np.append(base.c_bar, base.c_bar[0])
        self.params = MpcParams.from_matrices(base.H, base.P, base.A, base.B, C, D, c_bar, base.K,
                                              base.W, gamma=base.gamma, N=base.N)
        self.profile = make_profile(self.params)
        self.copy_row = C.shape[0] - 1

    def test_duplicated_row_breaks_licq_of_exact_problem(self):
        s = np.array([0.95, 0.8])
        ref = Reference(np.array([1.0, 0.0]), np.zeros(1))
        qp, layout = build_qp(self.params, self.profile, s, ref, relaxed=False)
        exact = solve(qp)
        on_bound = (np.abs(qp.A_in @ exact.y_star - qp.b_in) <= 1e-8) & (layout.row_kind == ROW_STATE)
        self.assertTrue(np.any(on_bound & (layout.row_index == 0)))
        self.assertTrue(np.any(on_bound & (layout.row_index == self.copy_row)))
        self.assertFalse(exact.licq)

    def test_slack_restores_licq(self):
        # the position bound is violated at k = 1 whatever the input
        s = np.array([0.95, 8.0])
        qp, _ = build_qp(self.params, self.profile, s, relaxed=False)
        with self.assertRaises(Infeasible):
            solve(qp)
        ev = eval_v_policy(self.params, self.profile, s)
        self.assertFalse(ev.feasible_unrelaxed)
        self.assertGreater(ev.slack_total, 0.0)
        self.assertTrue(ev.licq)
        sigma = ev.solve.y_star[ev.layout.sigma]
        relaxed_qp, layout = build_qp(self.params, self.profile, s, rho=ev.rho)
        own = {}
        for r in np.flatnonzero(layout.row_kind == ROW_STATE):
            if layout.row_stage[r] == 1 and layout.row_index[r] in (0, self.copy_row):
                own[layout.row_index[r]] = sigma[np.flatnonzero(relaxed_qp.A_in[r, layout.sigma])[0]]
        self.assertGreater(own[0], 0.0)
        self.assertAlmostEqual(own[0], own[self.copy_row], places=9)

    def test_zero_discount_keeps_only_first_stage(self):
        params = replace(double_integrator(), gamma=0.0)
        profile = make_profile(params)
        s = np.array([0.3, -0.2])
        ev = eval_v_policy(params, profile, s)
        # interior state: u_0 = 0 minimizes the diagonal stage cost
        self.assertAlmostEqual(ev.V, float(s @ params.H[:2, :2] @ s), places=9)
        self.assertAlmostEqual(ev.action[0], 0.0, places=7)
        q = eval_q(params, profile, s, np.array([1.5]))
        self.assertAlmostEqual(q.Q, float(s @ params.H[:2, :2] @ s) + params.H[2, 2] * 1.5 ** 2, places=9)


class TestTerminalCap(unittest.TestCase):
    """mpc.terminal_cap bounds the terminal set search."""

    def test_cap_reaches_the_pipeline(self):
        params = replace(double_integrator(), terminal_cap=37)
        with mock.patch("safe_rl.mpc.tighten_pipeline", wraps=tighten_pipeline) as pipeline:
            make_profile(params)
        self.assertEqual(pipeline.call_args.kwargs["cap"], 37)

    def test_small_cap_is_enforced(self):
        params = double_integrator()
        k_prime = make_profile(params).k_prime
        if k_prime <= 1:
            self.skipTest("terminal set determined by its first block")
        with self.assertRaises(NotFinitelyDetermined):
            make_profile(replace(params, terminal_cap=k_prime - 1))

    def test_cap_must_be_positive(self):
        with self.assertRaises(ValueError):
            replace(double_integrator(), terminal_cap=0).validate()

    def test_structure_reuses_terminal_rows(self):
        params = double_integrator(rotation=0.3)
        base = make_profile(params)
        wider = replace(params, W=params.W.scaled(1.2))
        with mock.patch("safe_rl.mpc.tighten_pipeline", wraps=tighten_pipeline) as pipeline:
            fixed = make_profile(wider, ("m",), structure=base)
        pipeline.assert_not_called()
        self.assertEqual((fixed.k_prime, fixed.blocks, fixed.rows), (base.k_prime, base.blocks, base.rows))
        full = make_profile(wider)
        np.testing.assert_allclose(fixed.c, full.c, atol=1e-12)
        self.assertIn("m", fixed.sens)


if __name__ == '__main__':
    unittest.main()
