#!/usr/bin/env python3
"""
Tests for closed-loop episodes, run outputs, figures and the quick acceptance checks
"""

import shutil
import sys
import tempfile
import unittest
from pathlib import Path
from unittest import mock

import numpy as np
import pandas as pd

sys.path.insert(0, str(Path(__file__).parent.parent))

from harness.checks import (check_learned_k, check_learning_effect, check_names, check_td_descent,
                            run_checks)
from harness.episode import constraint_rows, run_episode, setup_experiment
from harness.plotting import plot_history, plot_snapshots
from harness.reporting import read_learning_log, read_run_log, read_snapshots, write_run
from harness.sweep import compare_k, moving_average, run_sweep, spawn_seeds, sweep_frame
from shared_utils.config import ExperimentConfig


def short_config(**sections) -> ExperimentConfig:
    values = {
        "mpc": {"horizon": 4},
        "learning": {"max_iterations": 20},
        "run": {"steps": 6, "seed": 1},
        "output": {"rpi_points": 20},
    }
    for section, overrides in sections.items():
        values.setdefault(section, {}).update(overrides)
    return ExperimentConfig.from_dict(values)


class TestConstraintRows(unittest.TestCase):
    def test_box_rows(self):
        C, D, c_bar = constraint_rows([-1.0, -2.0], [1.0, 2.0], [-10.0], [10.0])
        self.assertEqual(C.shape, (6, 2))
        self.assertEqual(D.shape, (6, 1))
        s, a = np.array([0.5, -2.0]), np.array([3.0])
        residual = C @ s + D @ a + c_bar
        self.assertTrue(np.all(residual <= 0.0))
        self.assertEqual(residual[3], 0.0)
        self.assertTrue(np.any(C @ np.array([1.5, 0.0]) + D @ a + c_bar > 0.0))


class TestSetupExperiment(unittest.TestCase):
    def test_terminal_cap_from_config(self):
        exp = setup_experiment(short_config(mpc={"terminal_cap": 57}))
        self.assertEqual(exp.params.terminal_cap, 57)
        self.assertLessEqual(exp.profile.k_prime, 57)


class TestRunEpisode(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.log = run_episode(short_config())

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_log_shape(self):
        self.assertEqual(len(self.log.records), 6)
        self.assertEqual(len(self.log.learning), 6)
        # warm-up residuals precede the closed-loop ones
        self.assertEqual(len(self.log.residuals), 20 + 6)
        self.assertLess(self.log.residuals[0]["t"], 0)
        self.assertEqual([snap.t for snap in self.log.snapshots], [0, 5])
        self.assertIsNone(self.log.aborted)

    def test_episode_is_safe(self):
        self.assertEqual(self.log.violation_steps(), [])
        self.assertEqual(self.log.unexplained_violations(), [])
        for record in self.log.records:
            self.assertLessEqual(abs(record.action[0]), 10.0 + 1e-9)

    def test_states_follow_the_plant(self):
        for before, after in zip(self.log.records, self.log.records[1:]):
            A = np.array([[1.0, 0.1], [0.0, 1.0]])
            B = np.array([[0.05], [0.1]])
            np.testing.assert_allclose(after.state, A @ before.state + B @ before.action + before.w,
                                       atol=1e-12)

    def test_seeded_runs_repeat(self):
        again = run_episode(short_config())
        for first, second in zip(self.log.records, again.records):
            np.testing.assert_array_equal(first.state, second.state)

    def test_summary(self):
        summary = self.log.summary()
        self.assertEqual(summary["steps"], 6)
        self.assertAlmostEqual(summary["closed_loop_cost"], sum(r.stage_cost for r in self.log.records))

    def test_write_and_read_run(self):
        paths = write_run(self.log, self.temp_dir)
        for path in paths.values():
            self.assertTrue(path.exists(), path)

        run_log = read_run_log(self.temp_dir)
        self.assertEqual(len(run_log), 6)
        for column in ("t", "s_0", "s_1", "a_0", "ref_0", "V", "slack_total", "d_N_0", "m_0"):
            self.assertIn(column, run_log.columns)
        np.testing.assert_array_equal(run_log["s_0"].to_numpy(),
                                      [r.state[0] for r in self.log.records])
        self.assertEqual(len(read_learning_log(self.temp_dir)), 6)
        self.assertEqual([snap["t"] for snap in read_snapshots(self.temp_dir)], [0, 5])

    def test_figures(self):
        write_run(self.log, self.temp_dir)
        paths = plot_snapshots(read_snapshots(self.temp_dir), Path(self.temp_dir) / "figures")
        paths.append(plot_history(read_run_log(self.temp_dir), Path(self.temp_dir) / "history.svg"))
        for path in paths:
            self.assertTrue(path.exists())
            self.assertIn("<svg", path.read_text())


class TestExplorationEpisode(unittest.TestCase):
    def test_exploring_steps_are_marked_and_safe(self):
        log = run_episode(short_config(exploration={"enabled": True, "every": 2, "mode": "proximity",
                                                    "magnitude": 2.0}))
        self.assertEqual([r.exploring for r in log.records], [False, True] * 3)
        self.assertEqual(log.unexplained_violations(), [])

    def test_without_learning(self):
        log = run_episode(short_config(learning={"alpha": 0.0}))
        self.assertTrue(all(row["reason"] == "disabled" for row in log.learning))


class TestSweep(unittest.TestCase):
    def test_spawned_seeds_are_distinct_and_stable(self):
        seeds = spawn_seeds(0, 5)
        self.assertEqual(len(set(seeds)), 5)
        self.assertEqual(seeds, spawn_seeds(0, 5))

    def test_moving_average_skips_nan(self):
        values = [1.0, float("nan"), 3.0, 5.0]
        self.assertEqual(moving_average(values, 3, 3), 2.0)
        self.assertEqual(moving_average(values, 2, 4), 4.0)
        self.assertTrue(np.isnan(moving_average([float("nan")], 1, 1)))

    def test_in_process_sweep(self):
        summaries = run_sweep(short_config(run={"steps": 3}), episodes=2, workers=1)
        self.assertEqual(len(summaries), 2)
        self.assertNotEqual(summaries[0].seed, summaries[1].seed)
        frame = sweep_frame(summaries)
        self.assertEqual(list(frame["steps"]), [3, 3])
        self.assertEqual(len(summaries[0].psi), 3)


class TestQuickChecks(unittest.TestCase):
    def test_registry(self):
        self.assertEqual(check_names()[:2], ["tightening", "hull"])
        with self.assertRaises(ValueError):
            run_checks(ExperimentConfig(use_environment=False), ["nonsense"])

    def test_oracle_checks_pass(self):
        results = run_checks(ExperimentConfig(use_environment=False), ["tightening", "hull"], quick=True)
        self.assertEqual([r.name for r in results], ["tightening", "hull"])
        for result in results:
            self.assertTrue(result.passed, f"{result.name}: {result.message}")


class TestLearningChecks(unittest.TestCase):
    """Learning checks at a short horizon with the high reference from the start."""

    def config(self, steps):
        return short_config(run={"steps": steps, "reference_start": 0, "reference_end": 500},
                            output={"snapshot_steps": [0]})

    def test_learning_loosens_tightening(self):
        passed, message = check_learning_effect(self.config(40), quick=True)
        self.assertTrue(passed, message)

    def test_td_error_decreases(self):
        passed, message = check_td_descent(self.config(40), quick=True)
        self.assertTrue(passed, message)

    def test_learned_gain_episodes_stay_safe(self):
        cfg = self.config(30)
        cfg.noise["initial_set"] = "bounding_box"
        frame = compare_k(cfg, 2, workers=1)
        self.assertEqual(len(frame), 2)
        self.assertFalse(frame["aborted"].any())
        self.assertEqual(int(frame["unexplained_k"].sum()), 0)
        self.assertTrue((frame["area_k"] > 0).all())

    def test_learned_gain_decision(self):
        frame = pd.DataFrame({
            "cost_base": [1.0, 1.0, 1.0, 1.0], "cost_k": [0.9, 1.0, 0.8, 1.0],
            "area_base": [1.0, 1.0, 1.0, 1.0], "area_k": [1.1, 1.0, 1.3, 1.2],
            "aborted": [False, False, False, False],
        })
        with mock.patch("harness.checks.compare_k", return_value=frame):
            passed, message = check_learned_k(self.config(30), quick=True)
        self.assertTrue(passed)
        self.assertIn("cost not higher in 4/4", message)
        frame.loc[3, "area_k"] = 0.5
        frame.loc[2, "area_k"] = 0.5
        with mock.patch("harness.checks.compare_k", return_value=frame):
            passed, _ = check_learned_k(self.config(30), quick=True)
        self.assertFalse(passed)


if __name__ == '__main__':
    unittest.main()
