"""
Parameter-free trajectory decoder.

Maps a latent sample z = (z1, z2, z3) to a trajectory with fixed physics:
- longitudinal: constant acceleration, x_i = v0x * t_i + 0.5 * z1 * t_i^2
- lateral: offset-corrected logistic, y_i = lam * s(mu * tau_i) - lam * s(mu * tau_0)
  with lam = z2, mu = exp(z3), tau_i = t_i - t_pred / 2 and tau_0 = -t_pred / 2.

The closed-form Jacobian (decoder_gradients) drives both the training backward pass
and the curve-fit refinement in latent_tools.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from models import LatentParams, TimeGrid, Trajectory
from nn_core import GradientTape, Node


def predict_longitudinal(z1: float, v0x: float, grid: TimeGrid) -> np.ndarray:
    t = grid.times
    return v0x * t + 0.5 * z1 * t * t


def lateral_curve(lam: float, mu: float, t, t_pred: float) -> np.ndarray:
    """Lateral offset at arbitrary stamps t (seconds after t_0; negative t extends backward)."""
    tau = np.asarray(t, dtype=np.float64) - 0.5 * t_pred
    tau0 = -0.5 * t_pred
    return lam * expit(mu * tau) - lam * expit(mu * tau0)


def lateral_rate(lam: float, mu: float, t, t_pred: float) -> np.ndarray:
    """Time derivative of lateral_curve (lateral velocity, m/s)."""
    s = expit(mu * (np.asarray(t, dtype=np.float64) - 0.5 * t_pred))
    return lam * mu * s * (1.0 - s)


def predict_lateral(z2: float, z3: float, grid: TimeGrid) -> np.ndarray:
    return lateral_curve(z2, float(np.exp(z3)), grid.times, grid.t_pred)


def decode_params(lp: LatentParams, v0x: float, grid: TimeGrid) -> Trajectory:
    return Trajectory(
        xs=predict_longitudinal(lp.a_x, v0x, grid),
        ys=lateral_curve(lp.lam, lp.stretch, grid.times, grid.t_pred),
        grid=grid,
    )


def decode(z, v0x: float, grid: TimeGrid) -> Trajectory:
    return decode_params(LatentParams.from_latent(z), v0x, grid)


def decoder_gradients(z, grid: TimeGrid) -> np.ndarray:
    """
    Jacobian columns per prediction step, shape (P, 3):
    [dx_i/dz1, dy_i/dz2, dy_i/dz3]. The cross terms dx/dz2, dx/dz3 and dy/dz1 are zero.
    """
    z = np.asarray(z, dtype=np.float64)
    d1, d2, d3 = _jacobian(z[0:1], z[1:2], z[2:3], grid)
    return np.stack([d1[0], d2[0], d3[0]], axis=1)


def _jacobian(z1, z2, z3, grid: TimeGrid) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # Broadcasts over a leading batch dimension; returns three (B, P) arrays.
    t = grid.times
    mu = np.exp(np.asarray(z3))[:, None]
    lam = np.asarray(z2)[:, None]
    s = expit(mu * grid.tau)
    s0 = expit(mu * grid.tau0)
    d_x_z1 = np.broadcast_to(0.5 * t * t, s.shape)
    d_y_z2 = s - s0
    d_y_z3 = lam * mu * (s * (1.0 - s) * grid.tau - s0 * (1.0 - s0) * grid.tau0)
    return d_x_z1, d_y_z2, d_y_z3


# --- Tape op ---

def decode_op(tape: GradientTape, z: Node, v0x: np.ndarray, grid: TimeGrid) -> Node:
    """Batched decode for training: z (B, 3), v0x (B,) -> trajectories (B, P, 2)."""
    zv = z.value
    t = grid.times
    mu = np.exp(zv[:, 2])[:, None]
    lam = zv[:, 1][:, None]
    xs = v0x[:, None] * t + 0.5 * zv[:, 0][:, None] * t * t
    ys = lam * expit(mu * grid.tau) - lam * expit(mu * grid.tau0)
    value = np.stack([xs, ys], axis=-1)

    def backward(g: np.ndarray):
        d1, d2, d3 = _jacobian(zv[:, 0], zv[:, 1], zv[:, 2], grid)
        gx, gy = g[..., 0], g[..., 1]
        dz = np.column_stack([(gx * d1).sum(axis=1), (gy * d2).sum(axis=1), (gy * d3).sum(axis=1)])
        return (dz,)

    return tape.record("descriptive_decode", (z,), value, backward)
