"""
Learned trajectory decoder used by the plain VAE baseline.

z (3) -> decoder.expand.0 (16, tanh) -> decoder.expand.1 (64, tanh), then one LSTM head
per axis (decoder.lstm_x / decoder.lstm_y, hidden 125) whose final hidden state goes
through decoder.out_x / decoder.out_y (125 -> P, linear). Outputs are multiplied by
OUTPUT_SCALE (50 m, the encoder's gap scale) so unit-scale activations cover highway
distances.
"""

from __future__ import annotations

import numpy as np

from encoder import GAP_SCALE
from errors import ConfigurationError
from models import LATENT_DIM, LearnedDecoderConfig, TimeGrid, Trajectory
from nn_core import GradientTape, Node, ParamStore, dense_apply, last_step, lstm_run, repeat_steps, scale, stack

# Meters per unit of output activation, shared with the encoder's longitudinal gap scale.
# Over a 5 s horizon at 20-40 m/s the x track spans 2-4 units, lateral offsets stay
# below 0.2, both inside the range a linear head on tanh-bounded LSTM states reaches.
OUTPUT_SCALE = GAP_SCALE
AXES = ("x", "y")


def build_learned_decoder_params(store: ParamStore, cfg: LearnedDecoderConfig, pred_steps: int) -> None:
    dims = (LATENT_DIM, *cfg.expansion_dims)
    for k in range(len(cfg.expansion_dims)):
        store.add_dense(f"decoder.expand.{k}", dims[k], dims[k + 1])
    for axis in AXES:
        store.add_lstm(f"decoder.lstm_{axis}", dims[-1], cfg.lstm_hidden)
        store.add_dense(f"decoder.out_{axis}", cfg.lstm_hidden, pred_steps)


def learned_decoder_forward(
    tape: GradientTape,
    store: ParamStore,
    z: Node,
    pred_steps: int,
    unroll: str = "single",
) -> Node:
    """Batched decode: z (B, 3) -> (B, P, 2)."""
    if "decoder.expand.0.weight" not in store:
        raise ConfigurationError("parameter store has no learned-decoder block")
    h = z
    k = 0
    while f"decoder.expand.{k}.weight" in store:
        h = dense_apply(tape, store, f"decoder.expand.{k}", h, "tanh")
        k += 1
    seq = repeat_steps(tape, h, 1 if unroll == "single" else pred_steps)

    per_axis = []
    for axis in AXES:
        out_dim = store.value(f"decoder.out_{axis}.bias").shape[0]
        if out_dim != pred_steps:
            raise ConfigurationError(f"decoder.out_{axis} emits {out_dim} points, grid needs {pred_steps}")
        hidden, _ = lstm_run(tape, store, f"decoder.lstm_{axis}", seq)
        per_axis.append(dense_apply(tape, store, f"decoder.out_{axis}", last_step(tape, hidden)))
    return scale(tape, stack(tape, per_axis, axis=-1), OUTPUT_SCALE)


def decode_learned(z, params: ParamStore, grid: TimeGrid, cfg: LearnedDecoderConfig = LearnedDecoderConfig()) -> Trajectory:
    tape = GradientTape(recording=False)
    z = np.asarray(z, dtype=np.float64).reshape(1, LATENT_DIM)
    out = learned_decoder_forward(tape, params, tape.constant(z), grid.pred_steps, cfg.unroll).value[0]
    return Trajectory(xs=out[:, 0], ys=out[:, 1], grid=grid)
