"""
Training objectives.

- mse_reconstruction: mean squared error over all 2P trajectory entries.
- kl_standard_normal: closed-form KL(N(mean, std^2) || N(0, I)), summed over latent dims.
- vae_objective: reconstruction + kl_weight * KL as a LossBreakdown.

Batched inputs average over the leading batch dimension. The *_op variants record the
same quantities on a GradientTape for training.
"""

from __future__ import annotations

import numpy as np

from errors import NumericError, UsageError
from models import LatentGaussian, LossBreakdown, Trajectory
from nn_core import GradientTape, Node


def _as_matrix(pred) -> np.ndarray:
    return pred.as_matrix() if isinstance(pred, Trajectory) else np.asarray(pred, dtype=np.float64)


def mse_reconstruction(pred: Trajectory | np.ndarray, target: np.ndarray) -> float:
    p = _as_matrix(pred)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise UsageError(f"prediction shape {p.shape} does not match target shape {t.shape}")
    return float(np.mean((p - t) ** 2))


def _kl_terms(mean: np.ndarray, log_var: np.ndarray) -> np.ndarray:
    # expm1(x) - x >= 0 holds in exact arithmetic; clamp the rounding residue.
    return 0.5 * (mean * mean + np.maximum(np.expm1(log_var) - log_var, 0.0))


def kl_standard_normal(g: LatentGaussian) -> float:
    per_sample = _kl_terms(g.mean, 2.0 * np.log(g.std)).sum(axis=-1)
    return float(np.mean(per_sample))


def vae_objective(
    pred: Trajectory | np.ndarray,
    target: np.ndarray,
    g: LatentGaussian | None,
    kl_weight: float,
) -> LossBreakdown:
    """Without a latent Gaussian (deterministic encoders) the KL term is 0 and not evaluated."""
    recon = mse_reconstruction(pred, target)
    kl = kl_standard_normal(g) if g is not None else 0.0
    return LossBreakdown(total=recon + kl_weight * kl, reconstruction=recon, kl=kl, kl_weight=kl_weight)


# --- Tape ops ---

def mse_op(tape: GradientTape, pred: Node, target: np.ndarray) -> Node:
    if pred.shape != target.shape:
        raise UsageError(f"prediction shape {pred.shape} does not match target shape {target.shape}")
    diff = pred.value - target
    value = np.array(np.mean(diff * diff))

    def backward(g: np.ndarray):
        return (g * 2.0 * diff / diff.size,)

    return tape.record("mse", (pred,), value, backward)


def kl_op(tape: GradientTape, mean: Node, log_var: Node) -> Node:
    """Batch-mean KL of the (B, 3) Gaussian given by mean and log-variance nodes."""
    std = np.exp(0.5 * log_var.value)
    if not (np.all(np.isfinite(mean.value)) and np.all(np.isfinite(std)) and np.all(std > 0)):
        raise NumericError("latent Gaussian left the finite range")
    value = np.array(kl_standard_normal(LatentGaussian(mean=mean.value, std=std)))
    n = mean.value.shape[0] if mean.value.ndim > 1 else 1

    def backward(g: np.ndarray):
        return g * mean.value / n, g * 0.5 * np.expm1(log_var.value) / n

    return tape.record("kl", (mean, log_var), value, backward)


def weighted_sum_op(tape: GradientTape, a: Node, b: Node, weight: float) -> Node:
    def backward(g: np.ndarray):
        return g, g * weight

    return tape.record("weighted_sum", (a, b), np.array(a.value + weight * b.value), backward)


def objective_op(
    tape: GradientTape,
    pred: Node,
    target: np.ndarray,
    mean: Node,
    log_var: Node | None,
    kl_weight: float,
) -> tuple[Node, LossBreakdown]:
    """
    Record the training objective. log_var=None marks a deterministic encoder: the KL
    term is skipped entirely and the total is the reconstruction error.
    """
    recon = mse_op(tape, pred, target)
    if not np.isfinite(recon.value):
        raise NumericError(f"non-finite reconstruction loss {float(recon.value)}")
    if log_var is None:
        breakdown = LossBreakdown(total=float(recon.value), reconstruction=float(recon.value), kl=0.0, kl_weight=0.0)
        return recon, breakdown
    kl = kl_op(tape, mean, log_var)
    total = weighted_sum_op(tape, recon, kl, kl_weight)
    if not np.isfinite(total.value):
        raise NumericError(f"non-finite loss {float(total.value)}")
    breakdown = LossBreakdown(
        total=float(total.value),
        reconstruction=float(recon.value),
        kl=float(kl.value),
        kl_weight=kl_weight,
    )
    return total, breakdown
