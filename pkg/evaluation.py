"""
Evaluation metrics and their CSV emission.

- lateral_error: per-scenario scalar error (final step, mean or max over steps).
- ecdf / EcdfCurve.query / percentile: empirical CDF of errors, lower quantile convention.
- confusion: 3x3 maneuver confusion with row-normalized rates and macro accuracy.
- lambda_error_stats: bias and absolute-error statistics of predicted lambda.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, model_validator

from errors import UsageError
from models import MANEUVER_ORDER, FloatArray, ManeuverClass, Trajectory

ErrorMode = Literal["final", "mean", "max"]


def lateral_error(
    pred: Trajectory,
    target: np.ndarray,
    mode: ErrorMode = "final",
    longitudinal: bool = False,
) -> float:
    """|prediction - reference| on the lateral axis (or longitudinal), reduced per mode."""
    p = pred.as_matrix()
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise UsageError(f"prediction shape {p.shape} does not match target shape {t.shape}")
    e = np.abs(p[:, 0 if longitudinal else 1] - t[:, 0 if longitudinal else 1])
    if mode == "final":
        return float(e[-1])
    if mode == "mean":
        return float(np.mean(e))
    if mode == "max":
        return float(np.max(e))
    raise UsageError(f"unknown error mode {mode!r}")


class EcdfCurve(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    values: FloatArray

    @model_validator(mode="after")
    def _sorted(self) -> "EcdfCurve":
        if self.values.ndim != 1 or self.values.size < 1:
            raise ValueError("ECDF needs at least one value")
        if np.any(np.diff(self.values) < 0):
            raise ValueError("ECDF values must be sorted")
        return self

    @property
    def n(self) -> int:
        return int(self.values.size)

    def query(self, e: float) -> float:
        """Fraction of errors <= e."""
        return int(np.searchsorted(self.values, e, side="right")) / self.n

    def fractions(self) -> np.ndarray:
        return np.arange(1, self.n + 1) / self.n


def ecdf(errors: Sequence[float]) -> EcdfCurve:
    arr = np.asarray(errors, dtype=np.float64)
    if arr.size == 0:
        raise UsageError("ECDF of an empty error list")
    if not np.all(np.isfinite(arr)) or np.any(arr < 0):
        raise UsageError("errors must be finite and non-negative")
    return EcdfCurve(values=np.sort(arr))


def percentile(curve: EcdfCurve, q: float) -> float:
    """Smallest sample error e with query(e) >= q."""
    if not 0.0 < q <= 1.0:
        raise UsageError(f"percentile fraction must be in (0, 1], got {q}")
    k = max(1, math.ceil(q * curve.n - 1e-9))
    return float(curve.values[k - 1])


class ConfusionMatrix(BaseModel):
    """Rows are true maneuvers, columns predicted ones, both in LL, KL, LR order."""

    counts: list[list[int]]

    @property
    def rates(self) -> np.ndarray:
        c = np.asarray(self.counts, dtype=np.float64)
        totals = c.sum(axis=1, keepdims=True)
        return np.divide(c, totals, out=np.zeros_like(c), where=totals > 0)

    @property
    def accuracy(self) -> float:
        """Mean of the diagonal rates over rows that have samples."""
        c = np.asarray(self.counts)
        rows = c.sum(axis=1) > 0
        return float(np.mean(np.diag(self.rates)[rows])) if rows.any() else 0.0


def confusion(true_labels: Sequence[ManeuverClass], predicted: Sequence[ManeuverClass]) -> ConfusionMatrix:
    if len(true_labels) != len(predicted):
        raise UsageError(f"{len(true_labels)} true labels vs {len(predicted)} predictions")
    if not true_labels:
        raise UsageError("confusion of empty label lists")
    index = {c: k for k, c in enumerate(MANEUVER_ORDER)}
    counts = [[0] * 3 for _ in range(3)]
    for t, p in zip(true_labels, predicted):
        counts[index[ManeuverClass(t)]][index[ManeuverClass(p)]] += 1
    return ConfusionMatrix(counts=counts)


class LambdaErrorStats(BaseModel):
    count: int
    bias: float
    mean_abs: float
    std_abs: float
    min_abs: float
    max_abs: float


def lambda_error_stats(pred_lambdas: Sequence[float], ref_lambdas: Sequence[float]) -> LambdaErrorStats:
    pred = np.asarray(pred_lambdas, dtype=np.float64)
    ref = np.asarray(ref_lambdas, dtype=np.float64)
    if pred.shape != ref.shape:
        raise UsageError(f"{pred.size} predicted vs {ref.size} reference lambdas")
    if pred.size == 0:
        raise UsageError("lambda statistics of an empty list")
    signed = pred - ref
    err = np.abs(signed)
    return LambdaErrorStats(
        count=int(err.size),
        bias=float(np.mean(signed)),
        mean_abs=float(np.mean(err)),
        std_abs=float(np.std(err)),
        min_abs=float(np.min(err)),
        max_abs=float(np.max(err)),
    )


# --- CSV emission ---

def _write(df: pd.DataFrame, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False)
    return path


def write_ecdf_csv(curve: EcdfCurve, path: str | Path) -> Path:
    return _write(pd.DataFrame({"error": curve.values, "fraction": curve.fractions()}), path)


def write_confusion_csv(matrix: ConfusionMatrix, path: str | Path) -> Path:
    rates = matrix.rates
    rows = []
    for i, true in enumerate(MANEUVER_ORDER):
        row = {"true": true.value}
        for j, pred in enumerate(MANEUVER_ORDER):
            row[f"count_{pred.value}"] = matrix.counts[i][j]
        for j, pred in enumerate(MANEUVER_ORDER):
            row[f"rate_{pred.value}"] = rates[i, j]
        rows.append(row)
    return _write(pd.DataFrame(rows), path)


def write_lambda_stats_csv(stats: dict[str, LambdaErrorStats], path: str | Path) -> Path:
    return _write(pd.DataFrame([{"model": name, **s.model_dump()} for name, s in stats.items()]), path)
