"""
Tests for the learned decoder of the VAE baseline.
"""

import unittest

import numpy as np

from errors import ConfigurationError
from learned_decoder import OUTPUT_SCALE, build_learned_decoder_params, decode_learned, learned_decoder_forward
from losses import mse_op
from models import LearnedDecoderConfig, TimeGrid
from nn_core import GradientTape, ParamStore, grad_check

SMALL_GRID = TimeGrid(dt=0.25, t_obs=1.0, t_pred=2.0)
SMALL = LearnedDecoderConfig(expansion_dims=(4, 5), lstm_hidden=6)


def _store(cfg: LearnedDecoderConfig, pred_steps: int, seed: int = 0) -> ParamStore:
    store = ParamStore(seed)
    build_learned_decoder_params(store, cfg, pred_steps)
    return store


class TestLearnedDecoder(unittest.TestCase):
    """Shapes, parameter counts, gradients and configuration errors."""

    def test_full_size_shape_and_count(self):
        """Default layers on the 5 s / 0.04 s grid: P=125 points per axis, 222,652 parameters."""
        grid = TimeGrid()
        store = _store(LearnedDecoderConfig(), grid.pred_steps)
        self.assertEqual(grid.pred_steps, 125)
        self.assertEqual(store.num_parameters, 222652)
        traj = decode_learned(np.array([0.1, -0.2, 0.3]), store, grid)
        self.assertEqual(traj.as_matrix().shape, (125, 2))

    def test_zero_network_gives_zero_trajectory(self):
        """All-zero parameters decode to all zeros."""
        store = _store(SMALL, SMALL_GRID.pred_steps)
        for name in store:
            store.set(name, np.zeros_like(store.value(name)))
        traj = decode_learned([1.0, 2.0, 3.0], store, SMALL_GRID, SMALL)
        np.testing.assert_array_equal(traj.as_matrix(), np.zeros((SMALL_GRID.pred_steps, 2)))

    def test_unit_bias_maps_to_output_scale(self):
        """With zero weights and unit output biases every point sits at OUTPUT_SCALE = 50 m."""
        store = _store(SMALL, SMALL_GRID.pred_steps)
        for name in store:
            store.set(name, np.zeros_like(store.value(name)))
        for axis in ("x", "y"):
            store.set(f"decoder.out_{axis}.bias", np.ones(SMALL_GRID.pred_steps))
        traj = decode_learned([0.5, -1.0, 0.2], store, SMALL_GRID, SMALL)
        self.assertEqual(OUTPUT_SCALE, 50.0)
        np.testing.assert_array_equal(traj.as_matrix(), np.full((SMALL_GRID.pred_steps, 2), OUTPUT_SCALE))

    def test_gradients_for_both_unroll_modes(self):
        """Backward through expansion, per-axis LSTMs and output layers matches finite differences."""
        rng = np.random.default_rng(0)
        z = rng.normal(size=(3, 3))
        target = rng.normal(scale=20.0, size=(3, SMALL_GRID.pred_steps, 2))
        for unroll in ("single", "repeat"):
            with self.subTest(unroll=unroll):
                store = _store(SMALL, SMALL_GRID.pred_steps, seed=1)

                def loss_fn(params, tape):
                    out = learned_decoder_forward(tape, params, tape.constant(z), SMALL_GRID.pred_steps, unroll)
                    return mse_op(tape, out, target)

                report = grad_check(loss_fn, store, tolerance=1e-4)
                self.assertTrue(report.passed, report.blocks)

    def test_unroll_modes_differ(self):
        """Feeding the expansion once or P times gives different outputs."""
        store = _store(SMALL, SMALL_GRID.pred_steps)
        single = decode_learned([0.5, 0.5, 0.5], store, SMALL_GRID, SMALL)
        repeat = decode_learned([0.5, 0.5, 0.5], store, SMALL_GRID, SMALL.model_copy(update={"unroll": "repeat"}))
        self.assertFalse(np.allclose(single.as_matrix(), repeat.as_matrix()))

    def test_configuration_errors(self):
        """Missing decoder block or an output size different from P is rejected."""
        tape = GradientTape(recording=False)
        z = tape.constant(np.zeros((1, 3)))
        with self.assertRaises(ConfigurationError):
            learned_decoder_forward(tape, ParamStore(), z, SMALL_GRID.pred_steps)
        store = _store(SMALL, SMALL_GRID.pred_steps)
        with self.assertRaises(ConfigurationError):
            learned_decoder_forward(tape, store, z, SMALL_GRID.pred_steps + 1)


if __name__ == "__main__":
    unittest.main()
