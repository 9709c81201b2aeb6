"""
Cooperative-context encoder: observation window -> latent Gaussian over R^3.

Architecture (parameter names in the store):
- encoder.target_lstm          target velocities (O x 2) -> hidden 8
- encoder.neighbor_lstm        each neighbor window (O x 4) -> hidden 16, one cell shared
  across the slots (or encoder.neighbor_lstm.<j> per slot when sharing is off)
- encoder.fnn.<k>              tanh layers 136 -> 64 -> 64 -> 18 over the concatenated
  final hidden states
- encoder.head_mean            18 -> 3 latent mean
- encoder.head_logvar          18 -> 3 log-variance (only for sampling models)

Inputs are normalized per axis before the LSTMs: longitudinal speed is centered on
30 m/s and divided by 10 m/s, lateral speeds are divided by 0.1 m/s, longitudinal gaps by
50 m and lateral offsets by the lane width. Lane changes announce themselves in lateral
speeds of a few tenths of a m/s, which a common velocity scale would flatten next to
the longitudinal speed.

The latent mean head is multiplied by LATENT_SCALE, so its raw outputs stay O(1) while
lambda covers the +-8 m the watchdog allows. The architecture is read back from the store, so a loaded checkpoint needs
no separate config.
"""

from __future__ import annotations

import logging

import numpy as np

from errors import ConfigurationError
from models import LATENT_DIM, EncoderConfig, LatentGaussian, Scenario
from nn_core import (
    GradientTape,
    Node,
    ParamStore,
    concat,
    dense_apply,
    last_step,
    lstm_run,
    reshape,
    scale,
)
from scenario_data import LANE_WIDTH

logger = logging.getLogger(__name__)

SPEED_OFFSET = 30.0
VELOCITY_SCALE = 10.0
LATERAL_VELOCITY_SCALE = 0.1
GAP_SCALE = 50.0
# Target row (vx, vy) is shifted then divided; neighbor rows (x_rel, y_rel, vx_rel, vy_rel)
# are relative already and only divided.
TARGET_OFFSET = np.array([SPEED_OFFSET, 0.0])
TARGET_SCALE = np.array([VELOCITY_SCALE, LATERAL_VELOCITY_SCALE])
NEIGHBOR_SCALE = np.array([GAP_SCALE, LANE_WIDTH, VELOCITY_SCALE, LATERAL_VELOCITY_SCALE])
# Multiplier on the mean head, per latent (a_x, lambda, ln stretch).
LATENT_SCALE = np.array([1.0, 8.0, 1.0])

TARGET_LSTM = "encoder.target_lstm"
NEIGHBOR_LSTM = "encoder.neighbor_lstm"
HEAD_MEAN = "encoder.head_mean"
HEAD_LOGVAR = "encoder.head_logvar"


def build_encoder_params(store: ParamStore, cfg: EncoderConfig, with_logvar: bool) -> None:
    store.add_lstm(TARGET_LSTM, 2, cfg.target_hidden)
    if cfg.share_neighbor_lstm:
        store.add_lstm(NEIGHBOR_LSTM, 4, cfg.neighbor_hidden)
    else:
        for j in range(cfg.neighbor_count):
            store.add_lstm(f"{NEIGHBOR_LSTM}.{j}", 4, cfg.neighbor_hidden)
    dims = (cfg.fnn_input, *cfg.fnn_dims)
    for k in range(len(cfg.fnn_dims)):
        store.add_dense(f"encoder.fnn.{k}", dims[k], dims[k + 1])
    store.add_dense(HEAD_MEAN, dims[-1], LATENT_DIM)
    if with_logvar:
        store.add_dense(HEAD_LOGVAR, dims[-1], LATENT_DIM)


def has_logvar_head(store: ParamStore) -> bool:
    return f"{HEAD_LOGVAR}.weight" in store


def _hidden_size(store: ParamStore, prefix: str) -> int:
    return store.value(f"{prefix}.weight").shape[0] // 4


def expected_neighbor_count(store: ParamStore) -> int:
    if f"{TARGET_LSTM}.weight" not in store or "encoder.fnn.0.weight" not in store:
        raise ConfigurationError("parameter store has no encoder block")
    fnn_in = store.value("encoder.fnn.0.weight").shape[1]
    target_hidden = _hidden_size(store, TARGET_LSTM)
    if f"{NEIGHBOR_LSTM}.weight" in store:
        neighbor_hidden = _hidden_size(store, NEIGHBOR_LSTM)
    elif f"{NEIGHBOR_LSTM}.0.weight" in store:
        neighbor_hidden = _hidden_size(store, f"{NEIGHBOR_LSTM}.0")
    else:
        return 0
    count, rest = divmod(fnn_in - target_hidden, neighbor_hidden)
    if rest:
        raise ConfigurationError(f"encoder.fnn.0 input {fnn_in} does not fit the LSTM hidden sizes")
    return count


class EncoderOutput:
    """Tape nodes for the latent mean (B, 3) and, for sampling models, the log-variance."""

    __slots__ = ("mean", "log_var")

    def __init__(self, mean: Node, log_var: Node | None):
        self.mean = mean
        self.log_var = log_var


def encoder_forward(
    tape: GradientTape,
    store: ParamStore,
    target_obs: np.ndarray,
    neighbor_obs: np.ndarray,
) -> EncoderOutput:
    """Batched forward: target_obs (B, O, 2), neighbor_obs (B, N, O, 4)."""
    n_batch, n_neighbors = neighbor_obs.shape[0], neighbor_obs.shape[1]
    expected = expected_neighbor_count(store)
    if n_neighbors != expected:
        raise ConfigurationError(f"encoder expects {expected} neighbor slots, scenario has {n_neighbors}")

    target_seq, _ = lstm_run(tape, store, TARGET_LSTM, tape.constant((target_obs - TARGET_OFFSET) / TARGET_SCALE))
    parts = [last_step(tape, target_seq)]

    scaled = neighbor_obs / NEIGHBOR_SCALE
    if n_neighbors and f"{NEIGHBOR_LSTM}.weight" in store:
        steps = neighbor_obs.shape[2]
        flat = tape.constant(scaled.reshape(n_batch * n_neighbors, steps, 4))
        seq, _ = lstm_run(tape, store, NEIGHBOR_LSTM, flat)
        finals = last_step(tape, seq)
        parts.append(reshape(tape, finals, (n_batch, n_neighbors * finals.shape[-1])))
    else:
        for j in range(n_neighbors):
            seq, _ = lstm_run(tape, store, f"{NEIGHBOR_LSTM}.{j}", tape.constant(scaled[:, j]))
            parts.append(last_step(tape, seq))

    h = concat(tape, parts, axis=-1) if len(parts) > 1 else parts[0]
    k = 0
    while f"encoder.fnn.{k}.weight" in store:
        h = dense_apply(tape, store, f"encoder.fnn.{k}", h, "tanh")
        k += 1
    mean = scale(tape, dense_apply(tape, store, HEAD_MEAN, h), LATENT_SCALE)
    log_var = dense_apply(tape, store, HEAD_LOGVAR, h) if has_logvar_head(store) else None
    return EncoderOutput(mean, log_var)


def std_op(tape: GradientTape, log_var: Node) -> Node:
    std = np.exp(0.5 * log_var.value)

    def backward(g: np.ndarray):
        return (g * 0.5 * std,)

    return tape.record("std", (log_var,), std, backward)


def reparameterize_op(tape: GradientTape, mean: Node, std: Node, eps: np.ndarray) -> Node:
    def backward(g: np.ndarray):
        return g, g * eps

    return tape.record("reparameterize", (mean, std), mean.value + std.value * eps, backward)


def reparameterize(g: LatentGaussian, eps) -> np.ndarray:
    """z = mean + std * eps; eps = 0 gives the mean (evaluation mode)."""
    return g.mean + g.std * np.asarray(eps, dtype=np.float64)


def _stack(scenarios: list[Scenario]) -> tuple[np.ndarray, np.ndarray]:
    return (
        np.stack([s.target_obs for s in scenarios]),
        np.stack([s.neighbor_obs for s in scenarios]),
    )


def encode_arrays(store: ParamStore, scenarios: list[Scenario]) -> tuple[np.ndarray, np.ndarray | None]:
    """Inference-only batch encode; returns (means (B, 3), stds (B, 3) or None)."""
    target_obs, neighbor_obs = _stack(scenarios)
    out = encoder_forward(GradientTape(recording=False), store, target_obs, neighbor_obs)
    std = np.exp(0.5 * out.log_var.value) if out.log_var is not None else None
    return out.mean.value, std


def encode(scenario: Scenario, params: ParamStore) -> LatentGaussian:
    if not has_logvar_head(params):
        raise ConfigurationError("parameter store has no log-variance head; deterministic encoders expose only the mean")
    mean, std = encode_arrays(params, [scenario])
    return LatentGaussian(mean=mean[0], std=std[0])
