"""
Tests for the cooperative-context encoder: architecture, latent Gaussian output,
positional neighbor slots and end-to-end gradients through the descriptive decoder.
"""

import unittest

import numpy as np

from descriptive_decoder import decode_op
from encoder import (
    build_encoder_params,
    encode,
    encode_arrays,
    encoder_forward,
    expected_neighbor_count,
    reparameterize,
    reparameterize_op,
    std_op,
)
from errors import ConfigurationError
from losses import objective_op
from models import EncoderConfig, LatentGaussian, Scenario, TimeGrid
from nn_core import GradientTape, ParamStore, grad_check
from scenario_data import generate_synthetic, stack_scenarios

GRID = TimeGrid(dt=0.25, t_obs=1.0, t_pred=2.0)


def _store(with_logvar: bool = True, cfg: EncoderConfig = EncoderConfig(), seed: int = 0) -> ParamStore:
    store = ParamStore(seed)
    build_encoder_params(store, cfg, with_logvar)
    return store


def _scenarios(count: int = 3, seed: int = 0) -> tuple[Scenario, ...]:
    return generate_synthetic(count, seed=seed, grid=GRID, neighbor_presence=1.0).scenarios


class TestArchitecture(unittest.TestCase):
    """Parameter layout of the encoder variants."""

    def test_parameter_counts(self):
        """Shared neighbor LSTM: 15,908 entries with both heads, 57 fewer without log-variance."""
        self.assertEqual(_store(True).num_parameters, 15908)
        self.assertEqual(_store(False).num_parameters, 15851)

    def test_census_blocks(self):
        """Per-layer census follows the documented layer sizes."""
        census = _store(True).census()
        self.assertEqual(census["encoder.target_lstm"], 4 * 8 * (2 + 8) + 32)
        self.assertEqual(census["encoder.neighbor_lstm"], 4 * 16 * (4 + 16) + 64)
        self.assertEqual(census["encoder.fnn.0"], 136 * 64 + 64)
        self.assertEqual(census["encoder.fnn.2"], 64 * 18 + 18)
        self.assertEqual(census["encoder.head_mean"], 18 * 3 + 3)

    def test_separate_neighbor_lstms(self):
        """With sharing off there is one LSTM per slot and the count still reads back as 8."""
        store = _store(True, EncoderConfig(share_neighbor_lstm=False))
        self.assertIn("encoder.neighbor_lstm.7.weight", store)
        self.assertNotIn("encoder.neighbor_lstm.weight", store)
        self.assertEqual(expected_neighbor_count(store), 8)
        mean, std = encode_arrays(store, list(_scenarios(2)))
        self.assertEqual(mean.shape, (2, 3))
        self.assertTrue(np.all(std > 0))


class TestEncode(unittest.TestCase):
    """encode / encode_arrays outputs."""

    def test_output_shapes_and_positive_std(self):
        """mean and std each have length 3 and std > 0."""
        g = encode(_scenarios(1)[0], _store(True))
        self.assertIsInstance(g, LatentGaussian)
        self.assertEqual(g.mean.shape, (3,))
        self.assertTrue(np.all(g.std > 0))

    def test_zero_parameters_give_standard_normal(self):
        """All-zero weights: mean is the (zero) head bias and std is exp(0) = 1."""
        store = _store(True)
        for name in store:
            store.set(name, np.zeros_like(store.value(name)))
        g = encode(_scenarios(1)[0], store)
        np.testing.assert_array_equal(g.mean, np.zeros(3))
        np.testing.assert_array_equal(g.std, np.ones(3))

    def test_neighbor_slots_are_positional(self):
        """Swapping two slots with different contents changes the latent mean."""
        sc = _scenarios(1, seed=4)[0]
        swapped_obs = sc.neighbor_obs.copy()
        swapped_obs[[0, 1]] = swapped_obs[[1, 0]]
        swapped = sc.model_copy(update={"neighbor_obs": swapped_obs})
        self.assertFalse(np.allclose(sc.neighbor_obs[0], sc.neighbor_obs[1]))
        store = _store(True)
        a, _ = encode_arrays(store, [sc])
        b, _ = encode_arrays(store, [swapped])
        self.assertFalse(np.allclose(a, b))

    def test_batch_matches_single(self):
        """Encoding a batch equals encoding each scenario alone."""
        store = _store(True)
        scenarios = list(_scenarios(3))
        means, stds = encode_arrays(store, scenarios)
        for k, sc in enumerate(scenarios):
            g = encode(sc, store)
            np.testing.assert_allclose(means[k], g.mean, rtol=0, atol=1e-12)
            np.testing.assert_allclose(stds[k], g.std, rtol=0, atol=1e-12)

    def test_deterministic_store_has_no_gaussian(self):
        """A mean-only encoder cannot produce a LatentGaussian."""
        with self.assertRaises(ConfigurationError):
            encode(_scenarios(1)[0], _store(False))

    def test_neighbor_count_mismatch(self):
        """Scenarios with a different slot count than the encoder are rejected."""
        sc = _scenarios(1)[0]
        fewer = sc.model_copy(update={"neighbor_obs": sc.neighbor_obs[:6]})
        with self.assertRaises(ConfigurationError):
            encode_arrays(_store(True), [fewer])


class TestReparameterize(unittest.TestCase):
    """z = mean + std * eps."""

    def test_zero_eps_is_mean(self):
        """eps = 0 returns the mean."""
        g = LatentGaussian(mean=np.array([1.0, 2.0, 3.0]), std=np.array([0.5, 2.0, 1.0]))
        np.testing.assert_array_equal(reparameterize(g, np.zeros(3)), g.mean)

    def test_direct_evaluation(self):
        """mean (1,2,3), std 1, eps (0.5,-0.5,0) gives (1.5,1.5,3)."""
        g = LatentGaussian(mean=np.array([1.0, 2.0, 3.0]), std=np.ones(3))
        np.testing.assert_allclose(reparameterize(g, [0.5, -0.5, 0.0]), [1.5, 1.5, 3.0])


class TestEndToEndGradients(unittest.TestCase):
    """Tape gradients through encoder, sampling and descriptive decoder."""

    def test_dvae_forward_passes_grad_check(self):
        """Sampled-latent DVAE objective agrees with central differences on sampled entries."""
        batch = stack_scenarios(_scenarios(2, seed=9))
        eps = np.random.default_rng(0).standard_normal((2, 3))
        store = _store(True, seed=3)

        def loss_fn(params, tape):
            enc = encoder_forward(tape, params, batch.target_obs, batch.neighbor_obs)
            z = reparameterize_op(tape, enc.mean, std_op(tape, enc.log_var), eps)
            pred = decode_op(tape, z, batch.v0x, GRID)
            loss, _ = objective_op(tape, pred, batch.target_future, enc.mean, enc.log_var, 1.0)
            return loss

        report = grad_check(loss_fn, store, tolerance=1e-4, max_checks_per_block=6)
        self.assertTrue(report.passed, report.blocks)
        self.assertEqual(set(report.blocks), set(store.names()))

    def test_dvae_grad_check_over_fifty_scenarios(self):
        """The full DVAE objective on 50 mixed scenarios, noisy and sparse, agrees with central differences."""
        batch = stack_scenarios(generate_synthetic(50, noise_sigma=0.05, seed=21, grid=GRID).scenarios)
        eps = np.random.default_rng(4).standard_normal((50, 3))
        store = _store(True, seed=5)

        def loss_fn(params, tape):
            enc = encoder_forward(tape, params, batch.target_obs, batch.neighbor_obs)
            z = reparameterize_op(tape, enc.mean, std_op(tape, enc.log_var), eps)
            pred = decode_op(tape, z, batch.v0x, GRID)
            loss, _ = objective_op(tape, pred, batch.target_future, enc.mean, enc.log_var, 0.01)
            return loss

        report = grad_check(loss_fn, store, tolerance=1e-4, max_checks_per_block=4)
        self.assertTrue(report.passed, report.blocks)
        self.assertLessEqual(report.worst, 1e-4)

    def test_inference_tape_records_nothing(self):
        """A non-recording forward leaves the tape empty."""
        batch = stack_scenarios(_scenarios(2))
        tape = GradientTape(recording=False)
        encoder_forward(tape, _store(True), batch.target_obs, batch.neighbor_obs)
        self.assertEqual(len(tape), 0)


if __name__ == "__main__":
    unittest.main()
