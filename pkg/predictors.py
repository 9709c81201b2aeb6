"""
Assembly, training and inference for the compared methods.

- DVAE: encoder with mean and log-variance heads, sampled latent, descriptive decoder.
- DeAE: encoder with a mean head only, deterministic latent, descriptive decoder, no KL.
- VAE: encoder with both heads, sampled latent, learned decoder.
- CV: constant-velocity extrapolation, no parameters.

The descriptive decoder has no learnable parameters, so DVAE and DeAE stores contain
encoder entries only.
"""

from __future__ import annotations

import logging
from typing import Literal, Sequence

import numpy as np
from pydantic import BaseModel

from descriptive_decoder import decode_op, decode_params
from encoder import (
    build_encoder_params,
    encode_arrays,
    encoder_forward,
    has_logvar_head,
    reparameterize_op,
    std_op,
)
from errors import ConfigurationError, DataError, NumericError, UsageError
from learned_decoder import build_learned_decoder_params, learned_decoder_forward
from losses import objective_op
from models import (
    Dataset,
    EncoderConfig,
    LatentParams,
    LearnedDecoderConfig,
    ModelKind,
    Scenario,
    TimeGrid,
    TrainConfig,
    Trajectory,
)
from nn_core import GradientTape, Node, ParamStore, backward_pass, clip_gradients, sgd_step
from scenario_data import ScenarioBatch, stack_scenarios

logger = logging.getLogger(__name__)

PredictMode = Literal["eval", "sample"]
Prediction = tuple[Trajectory, LatentParams | None]


class EpochLog(BaseModel):
    epoch: int
    mean_total: float
    mean_recon: float
    mean_kl: float


def cv_predict(v0, grid: TimeGrid) -> Trajectory:
    """Straight-line extrapolation from the origin: x = v0x * t, y = v0y * t."""
    vx, vy = float(v0[0]), float(v0[1])
    t = grid.times
    return Trajectory(xs=vx * t, ys=vy * t, grid=grid)


def build_store(
    kind: ModelKind,
    grid: TimeGrid,
    encoder_cfg: EncoderConfig = EncoderConfig(),
    decoder_cfg: LearnedDecoderConfig = LearnedDecoderConfig(),
    seed: int = 0,
) -> ParamStore:
    store = ParamStore(seed)
    if kind is ModelKind.CV:
        return store
    build_encoder_params(store, encoder_cfg, with_logvar=kind.samples_latent)
    if not kind.descriptive:
        build_learned_decoder_params(store, decoder_cfg, grid.pred_steps)
    return store


def check_store(kind: ModelKind, params: ParamStore | None) -> None:
    """Raise ConfigurationError when the store's entries don't belong to `kind`."""
    if kind is ModelKind.CV:
        if params is not None and len(params):
            raise ConfigurationError("CV takes no parameters")
        return
    if params is None or "encoder.head_mean.weight" not in params:
        raise ConfigurationError(f"{kind.value} needs an encoder parameter store")
    if has_logvar_head(params) != kind.samples_latent:
        raise ConfigurationError(
            f"{kind.value} {'needs' if kind.samples_latent else 'must not have'} a log-variance head"
        )
    if params.has_prefix("decoder") == kind.descriptive:
        raise ConfigurationError(
            f"{kind.value} {'must not have' if kind.descriptive else 'needs'} learned-decoder parameters"
        )


def forward(
    tape: GradientTape,
    kind: ModelKind,
    store: ParamStore,
    batch: ScenarioBatch,
    grid: TimeGrid,
    eps: np.ndarray | None = None,
    decoder_cfg: LearnedDecoderConfig = LearnedDecoderConfig(),
) -> tuple[Node, Node, Node | None]:
    """Batched model forward; returns (trajectories (B, P, 2), latent mean, log-variance)."""
    enc = encoder_forward(tape, store, batch.target_obs, batch.neighbor_obs)
    z = enc.mean
    if kind.samples_latent and eps is not None:
        z = reparameterize_op(tape, enc.mean, std_op(tape, enc.log_var), eps)
    if kind.descriptive:
        pred = decode_op(tape, z, batch.v0x, grid)
    else:
        pred = learned_decoder_forward(tape, store, z, grid.pred_steps, decoder_cfg.unroll)
    return pred, enc.mean, enc.log_var


def train(
    kind: ModelKind,
    ds_train: Dataset,
    cfg: TrainConfig = TrainConfig(),
    encoder_cfg: EncoderConfig = EncoderConfig(),
    decoder_cfg: LearnedDecoderConfig = LearnedDecoderConfig(),
) -> tuple[ParamStore, list[EpochLog]]:
    """
    Mini-batch SGD on kl_weight * KL + MSE (DeAE: MSE only). Sampling models draw one
    eps per scenario per step. Shuffling and eps share one generator seeded from cfg.seed,
    so identical inputs give identical stores.
    """
    if not kind.trainable:
        raise UsageError("CV has no training")
    if len(ds_train) == 0:
        raise DataError("no samples")
    grid = ds_train.grid
    store = build_store(kind, grid, encoder_cfg, decoder_cfg, seed=cfg.seed)
    data = stack_scenarios(ds_train.scenarios)
    kl_weight = cfg.kl_weight if kind.samples_latent else 0.0
    rng = np.random.default_rng([cfg.seed, 1])
    logger.info(
        "Training %s on %d scenarios: %d parameters, %d epochs, batch %d, lr %g",
        kind.value, len(data), store.num_parameters, cfg.epochs, cfg.batch_size, cfg.lr,
    )

    logs: list[EpochLog] = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(data))
        sums = np.zeros(3)
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch = data.take(idx)
            eps = rng.standard_normal((len(idx), 3)) if kind.samples_latent else None

            store.zero_grad()
            tape = GradientTape()
            try:
                pred, mean, log_var = forward(tape, kind, store, batch, grid, eps, decoder_cfg)
                loss, breakdown = objective_op(
                    tape, pred, batch.target_future, mean, log_var if kind.samples_latent else None, kl_weight
                )
                backward_pass(tape, loss)
                if cfg.grad_clip is not None:
                    clip_gradients(store, cfg.grad_clip)
                sgd_step(store, cfg.lr)
            except NumericError as e:
                sid = ds_train.scenarios[int(idx[0])].scenario_id
                raise NumericError(f"epoch {epoch}, sample {start} ({sid}): {e}") from e
            sums += len(idx) * np.array([breakdown.total, breakdown.reconstruction, breakdown.kl])

        means = sums / len(order)
        log = EpochLog(epoch=epoch, mean_total=means[0], mean_recon=means[1], mean_kl=means[2])
        logs.append(log)
        logger.info(
            "%s epoch %d/%d: loss %.6f (recon %.6f, kl %.6f)",
            kind.value, epoch, cfg.epochs, log.mean_total, log.mean_recon, log.mean_kl,
        )
    return store, logs


# --- Inference ---

def _check_grid(scenarios: Sequence[Scenario], grid: TimeGrid) -> None:
    for sc in scenarios:
        sc.check_grid(grid)


def predict(
    kind: ModelKind,
    params: ParamStore | None,
    scenario: Scenario,
    grid: TimeGrid,
    mode: PredictMode = "eval",
    eps_source: np.random.Generator | None = None,
    decoder_cfg: LearnedDecoderConfig = LearnedDecoderConfig(),
) -> Prediction:
    """
    Eval mode uses the latent mean; sample mode draws eps from eps_source (sampling
    kinds only). DVAE/DeAE also return the interpreted latents, and the trajectory is
    decoded from exactly those values.
    """
    scenario.check_grid(grid)
    check_store(kind, params)
    if kind is ModelKind.CV:
        return cv_predict(scenario.v0, grid), None

    mean, std = encode_arrays(params, [scenario])
    z = mean[0]
    if mode == "sample" and kind.samples_latent:
        if eps_source is None:
            raise UsageError("sample mode needs an eps source")
        z = z + std[0] * eps_source.standard_normal(3)
    return _decode_one(kind, params, z, scenario, grid, decoder_cfg)


def _decode_one(kind, params, z, scenario, grid, decoder_cfg) -> Prediction:
    if kind.descriptive:
        lp = LatentParams.from_latent(z)
        return decode_params(lp, float(scenario.v0[0]), grid), lp
    tape = GradientTape(recording=False)
    out = learned_decoder_forward(tape, params, tape.constant(z[None]), grid.pred_steps, decoder_cfg.unroll)
    xy = out.value[0]
    return Trajectory(xs=xy[:, 0], ys=xy[:, 1], grid=grid), None


def predict_batch(
    kind: ModelKind,
    params: ParamStore | None,
    scenarios: Sequence[Scenario],
    grid: TimeGrid,
    decoder_cfg: LearnedDecoderConfig = LearnedDecoderConfig(),
) -> list[Prediction]:
    """Eval-mode predictions for many scenarios with one batched encoder pass."""
    _check_grid(scenarios, grid)
    check_store(kind, params)
    if not scenarios:
        return []
    if kind is ModelKind.CV:
        return [(cv_predict(sc.v0, grid), None) for sc in scenarios]
    means, _ = encode_arrays(params, list(scenarios))
    return [_decode_one(kind, params, z, sc, grid, decoder_cfg) for z, sc in zip(means, scenarios)]
