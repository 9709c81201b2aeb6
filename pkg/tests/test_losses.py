"""
Tests for the training objectives and their tape variants.
"""

import unittest
from unittest.mock import patch

import numpy as np

from errors import NumericError, UsageError
from losses import kl_op, kl_standard_normal, mse_op, mse_reconstruction, objective_op, vae_objective
from models import LatentGaussian
from nn_core import GradientTape, ParamStore, grad_check


class TestReconstruction(unittest.TestCase):
    """Mean squared error over the 2P trajectory entries."""

    def test_identity_and_unit_offset(self):
        """pred = target gives 0; an offset of 1 everywhere gives 1."""
        target = np.random.default_rng(0).normal(size=(8, 2))
        self.assertEqual(mse_reconstruction(target, target), 0.0)
        self.assertAlmostEqual(mse_reconstruction(target + 1.0, target), 1.0, places=12)

    def test_scalar_loop_oracle(self):
        """Matches an explicit double loop."""
        rng = np.random.default_rng(1)
        pred, target = rng.normal(size=(8, 2)), rng.normal(size=(8, 2))
        total = 0.0
        for i in range(8):
            for j in range(2):
                total += (pred[i, j] - target[i, j]) ** 2
        self.assertAlmostEqual(mse_reconstruction(pred, target), total / 16, places=12)

    def test_shape_mismatch(self):
        """Different shapes are a usage error."""
        with self.assertRaises(UsageError):
            mse_reconstruction(np.zeros((8, 2)), np.zeros((7, 2)))


class TestKl(unittest.TestCase):
    """Closed-form KL to the standard normal prior."""

    def test_prior_match_is_zero(self):
        """mean 0, std 1 gives exactly 0."""
        self.assertEqual(kl_standard_normal(LatentGaussian(mean=np.zeros(3), std=np.ones(3))), 0.0)

    def test_unit_mean_offset(self):
        """mean (1, 0, 0), std 1 gives 0.5."""
        g = LatentGaussian(mean=np.array([1.0, 0.0, 0.0]), std=np.ones(3))
        self.assertAlmostEqual(kl_standard_normal(g), 0.5, places=12)

    def test_non_negative_for_random_inputs(self):
        """KL never drops below zero."""
        rng = np.random.default_rng(2)
        for _ in range(50):
            g = LatentGaussian(mean=rng.normal(size=3), std=rng.uniform(1e-3, 5, size=3))
            self.assertGreaterEqual(kl_standard_normal(g), 0.0)

    def test_decreases_as_std_approaches_one(self):
        """With the mean fixed, the KL falls monotonically as sigma moves toward 1 from either side."""
        for mean in (np.zeros(3), np.array([0.5, -2.0, 1.0])):
            for path in (np.linspace(0.05, 1.0, 40), np.linspace(6.0, 1.0, 40)):
                with self.subTest(mean=mean.tolist(), start=float(path[0])):
                    kls = [kl_standard_normal(LatentGaussian(mean=mean, std=np.full(3, s))) for s in path]
                    self.assertTrue(np.all(np.diff(kls) < 0.0))

    def test_batched_is_mean_over_samples(self):
        """A (B, 3) Gaussian averages the per-sample KL."""
        g = LatentGaussian(mean=np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]), std=np.ones((2, 3)))
        self.assertAlmostEqual(kl_standard_normal(g), 0.25, places=12)


class TestObjective(unittest.TestCase):
    """vae_objective and the recorded objective_op."""

    def test_zero_weight_reduces_to_mse(self):
        """kl_weight=0 leaves only the reconstruction term."""
        rng = np.random.default_rng(3)
        pred, target = rng.normal(size=(8, 2)), rng.normal(size=(8, 2))
        g = LatentGaussian(mean=rng.normal(size=3), std=np.full(3, 0.5))
        out = vae_objective(pred, target, g, 0.0)
        self.assertEqual(out.total, mse_reconstruction(pred, target))

    def test_joint_zero(self):
        """Perfect prediction with a prior-matching latent costs nothing."""
        target = np.ones((8, 2))
        out = vae_objective(target, target, LatentGaussian(mean=np.zeros(3), std=np.ones(3)), 1.0)
        self.assertEqual(out.total, 0.0)

    def test_breakdown_resums(self):
        """total = reconstruction + kl_weight * kl for random inputs."""
        rng = np.random.default_rng(4)
        for w in (0.1, 1.0, 3.0):
            with self.subTest(kl_weight=w):
                g = LatentGaussian(mean=rng.normal(size=3), std=rng.uniform(0.2, 2, size=3))
                out = vae_objective(rng.normal(size=(8, 2)), rng.normal(size=(8, 2)), g, w)
                self.assertAlmostEqual(out.total, out.reconstruction + w * out.kl, places=12)

    def test_objective_op_agrees_with_plain_objective(self):
        """Tape value and breakdown equal vae_objective on the same arrays."""
        rng = np.random.default_rng(5)
        pred, target = rng.normal(size=(2, 8, 2)), rng.normal(size=(2, 8, 2))
        mean, log_var = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
        tape = GradientTape(recording=False)
        node, breakdown = objective_op(tape, tape.constant(pred), target, tape.constant(mean), tape.constant(log_var), 0.7)
        plain = vae_objective(pred, target, LatentGaussian(mean=mean, std=np.exp(0.5 * log_var)), 0.7)
        self.assertAlmostEqual(float(node.value), plain.total, places=12)
        self.assertAlmostEqual(breakdown.kl, plain.kl, places=12)

    def test_deterministic_encoder_never_evaluates_kl(self):
        """Without a log-variance the KL routine is not called at all."""
        tape = GradientTape(recording=False)
        with patch("losses.kl_standard_normal") as kl:
            _, breakdown = objective_op(tape, tape.constant(np.zeros((1, 8, 2))), np.ones((1, 8, 2)),
                                        tape.constant(np.zeros((1, 3))), None, 1.0)
        kl.assert_not_called()
        self.assertEqual(breakdown.kl, 0.0)
        self.assertEqual(breakdown.total, 1.0)

    def test_kl_and_mse_gradients(self):
        """objective_op backward agrees with central differences for mean, log-variance and prediction."""
        rng = np.random.default_rng(6)
        store = ParamStore.from_arrays([
            ("pred", rng.normal(size=(3, 8, 2))),
            ("mean", rng.normal(size=(3, 3))),
            ("log_var", rng.normal(scale=0.5, size=(3, 3))),
        ])
        target = rng.normal(size=(3, 8, 2))

        def loss_fn(params, tape):
            node, _ = objective_op(tape, tape.param(params, "pred"), target, tape.param(params, "mean"),
                                   tape.param(params, "log_var"), 0.5)
            return node

        report = grad_check(loss_fn, store, tolerance=1e-6)
        self.assertTrue(report.passed, report.blocks)

    def test_non_finite_latent_is_numeric_error(self):
        """An overflowing log-variance aborts with NumericError."""
        tape = GradientTape(recording=False)
        with self.assertRaises(NumericError):
            kl_op(tape, tape.constant(np.zeros((1, 3))), tape.constant(np.full((1, 3), 2000.0)))
        with self.assertRaises(NumericError):
            objective_op(tape, tape.constant(np.full((1, 8, 2), np.inf)), np.zeros((1, 8, 2)),
                         tape.constant(np.zeros((1, 3))), None, 0.0)

    def test_mse_op_shape_mismatch(self):
        """Recorded MSE rejects mismatched shapes."""
        tape = GradientTape(recording=False)
        with self.assertRaises(UsageError):
            mse_op(tape, tape.constant(np.zeros((1, 8, 2))), np.zeros((1, 7, 2)))


if __name__ == "__main__":
    unittest.main()
