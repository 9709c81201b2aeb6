"""
Tools built on the interpretable latent space.

Responsibilities:
- fit_reference_params: non-causal least-squares fit of (a_x, lambda, stretch) to a
  ground-truth future track. It reads the track it is predicting, so it is only used for
  reference distributions and threshold tuning, never inside a prediction path.
- classify: threshold maneuver classifier over (lambda, stretch).
- validate: rule-based watchdog over decoded latents.
- reference_histogram: per-parameter histograms of fitted references.
"""

from __future__ import annotations

import logging
import math
from typing import Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel
from scipy.optimize import least_squares
from scipy.special import expit

from descriptive_decoder import decoder_gradients, lateral_curve
from errors import DataError, UsageError
from models import (
    ClassifierThresholds,
    Dataset,
    LatentParams,
    ManeuverClass,
    Scenario,
    TimeGrid,
    WatchdogRuleSet,
)

logger = logging.getLogger(__name__)

LAMBDA_GRID = np.arange(-10.0, 10.0 + 1e-9, 0.25)
LOG_STRETCH_GRID = np.arange(-4.0, 2.0 + 1e-9, 0.25)
STEP_TOLERANCE = 1e-10
MAX_EVALUATIONS = 200
DEGENERATE_LATERAL = 1e-12


class CurveFit(BaseModel):
    a_x: float
    lam: float
    stretch: float
    # Root-mean-square residuals of the fitted curves, meters.
    residual_x: float
    residual_y: float
    degenerate: bool = False

    def params(self) -> LatentParams:
        return LatentParams(a_x=self.a_x, lam=self.lam, stretch=self.stretch)


class Verdict(BaseModel):
    accepted: bool
    violations: tuple[str, ...] = ()


# --- Curve fit ---

def _fit_longitudinal(xs: np.ndarray, v0x: float, t: np.ndarray) -> tuple[float, float]:
    q = 0.5 * t * t
    r = xs - v0x * t
    a = float(np.dot(q, r) / np.dot(q, q))
    return a, float(np.sqrt(np.mean((r - a * q) ** 2)))


def _coarse_lateral(ys: np.ndarray, grid: TimeGrid) -> tuple[float, float]:
    mu = np.exp(LOG_STRETCH_GRID)[:, None]
    shape = expit(mu * grid.tau) - expit(mu * grid.tau0)  # (S, P)
    sse = ((LAMBDA_GRID[:, None, None] * shape[None] - ys) ** 2).sum(axis=-1)  # (L, S)
    i, j = np.unravel_index(int(np.argmin(sse)), sse.shape)
    return float(LAMBDA_GRID[i]), float(LOG_STRETCH_GRID[j])


def fit_reference_params(target_future: np.ndarray, v0x: float, grid: TimeGrid) -> CurveFit:
    """
    a_x by closed-form least squares on the longitudinal track; (lambda, ln stretch) by a
    coarse grid search followed by Levenberg-Marquardt with the decoder's analytic Jacobian.
    """
    future = np.asarray(target_future, dtype=np.float64)
    if future.shape != (grid.pred_steps, 2):
        raise UsageError(f"target_future shape {future.shape} does not match P={grid.pred_steps}")
    if grid.pred_steps < 3:
        raise UsageError("curve fitting needs at least 3 prediction steps")
    t = grid.times
    xs, ys = future[:, 0], future[:, 1]
    a_x, res_x = _fit_longitudinal(xs, v0x, t)

    if np.max(np.abs(ys)) <= DEGENERATE_LATERAL:
        mu = float(np.exp(LOG_STRETCH_GRID[0]))
        return CurveFit(a_x=a_x, lam=0.0, stretch=mu, residual_x=res_x, residual_y=float(np.sqrt(np.mean(ys * ys))), degenerate=True)

    lam0, s0 = _coarse_lateral(ys, grid)

    def residual(p: np.ndarray) -> np.ndarray:
        return lateral_curve(p[0], math.exp(p[1]), t, grid.t_pred) - ys

    def jacobian(p: np.ndarray) -> np.ndarray:
        return decoder_gradients([a_x, p[0], p[1]], grid)[:, 1:]

    sol = least_squares(
        residual,
        np.array([lam0, s0]),
        jac=jacobian,
        method="lm",
        xtol=STEP_TOLERANCE,
        ftol=1e-12,
        gtol=1e-12,
        max_nfev=MAX_EVALUATIONS,
    )
    lam, log_mu = float(sol.x[0]), float(sol.x[1])
    res_y = float(np.sqrt(np.mean(sol.fun ** 2)))
    return CurveFit(a_x=a_x, lam=lam, stretch=math.exp(log_mu), residual_x=res_x, residual_y=res_y)


def fit_scenarios(scenarios: Sequence[Scenario], grid: TimeGrid) -> list[CurveFit]:
    return [fit_reference_params(sc.target_future, float(sc.v0[0]), grid) for sc in scenarios]


# --- Classifier and watchdog ---

def classify(lp: LatentParams, th: ClassifierThresholds = ClassifierThresholds()) -> ManeuverClass:
    if lp.stretch < th.t_mu or abs(lp.lam) < th.t_lambda:
        return ManeuverClass.KL
    if lp.lam > th.t_lambda:
        return ManeuverClass.LL
    return ManeuverClass.LR


def validate(lp: LatentParams, rules: WatchdogRuleSet = WatchdogRuleSet()) -> Verdict:
    """Check every rule; the verdict lists all violated rule names."""
    values = (lp.a_x, lp.lam, lp.stretch)
    if not all(math.isfinite(v) for v in values):
        return Verdict(accepted=False, violations=("finite",))
    violations = []
    if not abs(lp.lam) < rules.lambda_abs_max:
        violations.append("lambda_abs_max")
    if not rules.stretch_min <= lp.stretch <= rules.stretch_max:
        violations.append("stretch_range")
    if not rules.a_x_min <= lp.a_x <= rules.a_x_max:
        violations.append("a_x_range")
    return Verdict(accepted=not violations, violations=tuple(violations))


# --- Reference histograms ---

HISTOGRAM_PARAMETERS = ("lambda", "stretch", "a_x")


def reference_histogram(
    ds: Dataset,
    bins: int = 40,
    label_filter: ManeuverClass | Sequence[ManeuverClass] | None = None,
    fits: Sequence[CurveFit] | None = None,
) -> pd.DataFrame:
    """
    Histogram the fitted references per parameter; returns rows of
    (parameter, bin_left, bin_right, count). Pass precomputed `fits` aligned with ds.
    """
    if fits is None:
        fits = fit_scenarios(ds.scenarios, ds.grid)
    if label_filter is not None:
        wanted = {label_filter} if isinstance(label_filter, ManeuverClass) else set(label_filter)
        fits = [f for f, sc in zip(fits, ds.scenarios) if sc.label in wanted]
    if not fits:
        raise DataError("no samples")

    columns = {
        "lambda": np.array([f.lam for f in fits]),
        "stretch": np.array([f.stretch for f in fits]),
        "a_x": np.array([f.a_x for f in fits]),
    }
    frames = []
    for name in HISTOGRAM_PARAMETERS:
        counts, edges = np.histogram(columns[name], bins=bins)
        frames.append(pd.DataFrame({"parameter": name, "bin_left": edges[:-1], "bin_right": edges[1:], "count": counts}))
    logger.info("Reference histograms over %d fitted tracks", len(fits))
    return pd.concat(frames, ignore_index=True)
