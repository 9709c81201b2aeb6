"""
Tests for evaluation metrics: per-scenario errors, ECDF and percentiles, confusion
matrices, lambda error statistics and their CSV emission.
"""

import tempfile
import unittest
from pathlib import Path

import numpy as np
import pandas as pd

from errors import UsageError
from evaluation import (
    confusion,
    ecdf,
    lambda_error_stats,
    lateral_error,
    percentile,
    write_confusion_csv,
    write_ecdf_csv,
    write_lambda_stats_csv,
)
from models import ManeuverClass, TimeGrid, Trajectory

GRID = TimeGrid(dt=0.25, t_obs=1.0, t_pred=2.0)
LL, KL, LR = ManeuverClass.LL, ManeuverClass.KL, ManeuverClass.LR


def _traj(ys: np.ndarray, xs: np.ndarray | None = None) -> Trajectory:
    return Trajectory(xs=np.zeros(GRID.pred_steps) if xs is None else xs, ys=ys, grid=GRID)


class TestLateralError(unittest.TestCase):
    """Scalar error per scenario in each mode."""

    def test_identity_and_constant_offset(self):
        """Zero error for a perfect prediction and 0.3 m for a constant 0.3 m offset in every mode."""
        target = np.column_stack([np.zeros(GRID.pred_steps), np.linspace(0, 2, GRID.pred_steps)])
        for mode in ("final", "mean", "max"):
            with self.subTest(mode=mode):
                self.assertEqual(lateral_error(_traj(target[:, 1]), target, mode), 0.0)
                self.assertAlmostEqual(lateral_error(_traj(target[:, 1] + 0.3), target, mode), 0.3, places=12)

    def test_ramp(self):
        """A 0..1 m ramp error: final and max are 1, mean is the average of the ramp."""
        ramp = np.linspace(0.0, 1.0, GRID.pred_steps)
        target = np.zeros((GRID.pred_steps, 2))
        pred = _traj(ramp)
        self.assertEqual(lateral_error(pred, target, "final"), 1.0)
        self.assertEqual(lateral_error(pred, target, "max"), 1.0)
        self.assertAlmostEqual(lateral_error(pred, target, "mean"), sum(ramp) / len(ramp), places=12)

    def test_longitudinal_axis(self):
        """With longitudinal=True the x column is compared instead."""
        target = np.zeros((GRID.pred_steps, 2))
        pred = _traj(np.zeros(GRID.pred_steps), xs=np.full(GRID.pred_steps, 2.0))
        self.assertEqual(lateral_error(pred, target), 0.0)
        self.assertEqual(lateral_error(pred, target, longitudinal=True), 2.0)

    def test_errors(self):
        """Unknown modes and mismatched shapes are usage errors."""
        target = np.zeros((GRID.pred_steps, 2))
        with self.assertRaises(UsageError):
            lateral_error(_traj(np.zeros(GRID.pred_steps)), target, "median")
        with self.assertRaises(UsageError):
            lateral_error(_traj(np.zeros(GRID.pred_steps)), target[:-1])


class TestEcdf(unittest.TestCase):
    """Empirical CDF and the lower percentile convention."""

    def test_query(self):
        """Fraction of errors <= e, 0 below the minimum and 1 at the maximum."""
        curve = ecdf([2.0, 0.5, 4.0, 1.0])
        self.assertEqual(curve.query(1.5), 0.5)
        self.assertEqual(curve.query(4.0), 1.0)
        self.assertEqual(curve.query(0.1), 0.0)
        np.testing.assert_array_equal(curve.values, [0.5, 1.0, 2.0, 4.0])

    def test_percentile(self):
        """95th percentile of [1, 2, 3, 4] is 4; q=1 is the max; a singleton returns itself."""
        curve = ecdf([1.0, 2.0, 3.0, 4.0])
        self.assertEqual(percentile(curve, 0.95), 4.0)
        self.assertEqual(percentile(curve, 1.0), 4.0)
        self.assertEqual(percentile(curve, 0.5), 2.0)
        for q in (0.01, 0.5, 1.0):
            with self.subTest(q=q):
                self.assertEqual(percentile(ecdf([0.7]), q), 0.7)

    def test_percentile_is_smallest_sample_reaching_q(self):
        """query(percentile(q)) >= q and no smaller sample qualifies."""
        values = np.random.default_rng(0).exponential(size=37)
        curve = ecdf(values)
        for q in (0.1, 0.5, 0.9, 0.95):
            with self.subTest(q=q):
                p = percentile(curve, q)
                self.assertGreaterEqual(curve.query(p), q)
                smaller = curve.values[curve.values < p]
                if smaller.size:
                    self.assertLess(curve.query(smaller[-1]), q)

    def test_duplicated_worst_error_never_lowers_a_percentile(self):
        """Appending another copy of the maximum error leaves every percentile equal or higher."""
        values = np.random.default_rng(1).exponential(size=53)
        before = ecdf(values)
        after = ecdf(np.append(values, values.max()))
        for q in np.linspace(0.01, 1.0, 100):
            with self.subTest(q=q):
                self.assertGreaterEqual(percentile(after, q), percentile(before, q))

    def test_percentile_inverts_query_on_samples(self):
        """percentile(query(e)) returns e for every observed error, ties included."""
        values = np.round(np.random.default_rng(2).exponential(size=41), 1)
        curve = ecdf(values)
        for e in values:
            with self.subTest(e=e):
                self.assertEqual(percentile(curve, curve.query(e)), e)

    def test_invalid_inputs(self):
        """Empty, negative or non-finite errors and q outside (0, 1] are rejected."""
        for bad in ([], [1.0, -0.1], [np.nan]):
            with self.subTest(errors=bad):
                with self.assertRaises(UsageError):
                    ecdf(bad)
        with self.assertRaises(UsageError):
            percentile(ecdf([1.0]), 0.0)


class TestConfusion(unittest.TestCase):
    """3x3 confusion matrix over LL, KL, LR."""

    def test_perfect_classifier(self):
        """Identical lists give identity rates and accuracy 1."""
        labels = [LL, KL, LR, KL]
        matrix = confusion(labels, labels)
        np.testing.assert_array_equal(matrix.rates, np.eye(3))
        self.assertEqual(matrix.accuracy, 1.0)

    def test_constant_misclassifier(self):
        """All KL predicted as LL: rate 1 at (KL, LL), accuracy 0."""
        matrix = confusion([KL] * 5, [LL] * 5)
        self.assertEqual(matrix.rates[1, 0], 1.0)
        self.assertEqual(matrix.accuracy, 0.0)

    def test_hand_counted_fixture(self):
        """Nine pairs counted by hand."""
        true = [LL, LL, LL, KL, KL, KL, LR, LR, LR]
        pred = [LL, LL, KL, KL, KL, LR, LR, KL, LR]
        matrix = confusion(true, pred)
        self.assertEqual(matrix.counts, [[2, 1, 0], [0, 2, 1], [0, 1, 2]])
        self.assertAlmostEqual(matrix.accuracy, 2 / 3, places=12)

    def test_length_mismatch(self):
        """Lists of different lengths are rejected."""
        with self.assertRaises(UsageError):
            confusion([LL], [LL, KL])


class TestLambdaErrors(unittest.TestCase):
    """Bias and absolute-error statistics of predicted lambda."""

    def test_perfect_and_shifted(self):
        """Equal lists give zeros; a +0.2 shift gives bias 0.2, std 0, max 0.2."""
        ref = [3.1, -2.0, 0.1, 4.0]
        zero = lambda_error_stats(ref, ref)
        self.assertEqual((zero.bias, zero.mean_abs, zero.max_abs), (0.0, 0.0, 0.0))
        shifted = lambda_error_stats([r + 0.2 for r in ref], ref)
        self.assertAlmostEqual(shifted.bias, 0.2, places=12)
        self.assertAlmostEqual(shifted.std_abs, 0.0, places=12)
        self.assertAlmostEqual(shifted.max_abs, 0.2, places=12)

    def test_scalar_oracle(self):
        """Random fixture matches loop-computed statistics."""
        rng = np.random.default_rng(1)
        pred, ref = rng.normal(size=20), rng.normal(size=20)
        stats = lambda_error_stats(pred, ref)
        abs_err = [abs(p - r) for p, r in zip(pred, ref)]
        mean = sum(abs_err) / 20
        self.assertAlmostEqual(stats.bias, sum(p - r for p, r in zip(pred, ref)) / 20, places=12)
        self.assertAlmostEqual(stats.mean_abs, mean, places=12)
        self.assertAlmostEqual(stats.std_abs, (sum((e - mean) ** 2 for e in abs_err) / 20) ** 0.5, places=12)
        self.assertEqual(stats.min_abs, min(abs_err))
        self.assertEqual(stats.count, 20)


class TestCsvEmission(unittest.TestCase):
    """CSV writers produce header rows readable by pandas."""

    def test_writers(self):
        """ECDF, confusion and lambda-stat files have the documented columns."""
        with tempfile.TemporaryDirectory() as tmp:
            out = Path(tmp) / "nested"
            write_ecdf_csv(ecdf([0.2, 0.1]), out / "ecdf.csv")
            write_confusion_csv(confusion([LL, KL], [LL, LR]), out / "confusion.csv")
            write_lambda_stats_csv({"DVAE": lambda_error_stats([1.0], [0.5])}, out / "lambda.csv")

            curve = pd.read_csv(out / "ecdf.csv")
            self.assertEqual(list(curve.columns), ["error", "fraction"])
            self.assertEqual(curve["fraction"].tolist(), [0.5, 1.0])
            matrix = pd.read_csv(out / "confusion.csv")
            self.assertEqual(matrix["true"].tolist(), ["LL", "KL", "LR"])
            self.assertEqual(int(matrix.loc[1, "count_LR"]), 1)
            stats = pd.read_csv(out / "lambda.csv")
            self.assertEqual(stats.loc[0, "model"], "DVAE")
            self.assertAlmostEqual(stats.loc[0, "bias"], 0.5)


if __name__ == "__main__":
    unittest.main()
