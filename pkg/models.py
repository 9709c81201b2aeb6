from __future__ import annotations

import math
from enum import StrEnum
from typing import Annotated, Literal, Optional

import numpy as np
from pydantic import BaseModel, BeforeValidator, ConfigDict, Field, field_validator, model_validator

from errors import ConfigurationError


def _frozen_array(value) -> np.ndarray:
    """Copy to a read-only float64 array so built scenarios can be shared freely."""
    arr = np.array(value, dtype=np.float64)
    arr.flags.writeable = False
    return arr


FloatArray = Annotated[np.ndarray, BeforeValidator(_frozen_array)]

LATENT_DIM = 3


class ManeuverClass(StrEnum):
    LL = "LL"  # lane change left
    KL = "KL"  # keep lane
    LR = "LR"  # lane change right


# Fixed row/column order for class mixes and confusion matrices.
MANEUVER_ORDER: tuple[ManeuverClass, ...] = (ManeuverClass.LL, ManeuverClass.KL, ManeuverClass.LR)


class ModelKind(StrEnum):
    DVAE = "DVAE"
    VAE = "VAE"
    DEAE = "DeAE"
    CV = "CV"

    @classmethod
    def _missing_(cls, value):
        # CLI flags arrive lower-case ("dvae", "deae").
        if isinstance(value, str):
            for member in cls:
                if member.value.lower() == value.strip().lower():
                    return member
        return None

    @property
    def samples_latent(self) -> bool:
        return self in (ModelKind.DVAE, ModelKind.VAE)

    @property
    def descriptive(self) -> bool:
        return self in (ModelKind.DVAE, ModelKind.DEAE)

    @property
    def trainable(self) -> bool:
        return self is not ModelKind.CV


class TimeGrid(BaseModel):
    """Observation/prediction sampling. Prediction stamps are t_i = i*dt for i = 1..P."""

    model_config = ConfigDict(frozen=True)

    dt: float = Field(default=0.04, gt=0)
    t_obs: float = Field(default=3.0, gt=0)
    t_pred: float = Field(default=5.0, gt=0)

    @model_validator(mode="after")
    def _whole_steps(self) -> "TimeGrid":
        for name in ("t_obs", "t_pred"):
            steps = getattr(self, name) / self.dt
            if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
                raise ValueError(f"{name}={getattr(self, name)} is not a whole number of dt={self.dt} steps")
        return self

    @property
    def obs_steps(self) -> int:
        return int(round(self.t_obs / self.dt))

    @property
    def pred_steps(self) -> int:
        return int(round(self.t_pred / self.dt))

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(1, self.pred_steps + 1, dtype=np.float64)

    @property
    def tau(self) -> np.ndarray:
        return self.times - 0.5 * self.t_pred

    @property
    def tau0(self) -> float:
        return -0.5 * self.t_pred

    @property
    def obs_times(self) -> np.ndarray:
        """Observation stamps relative to t_0, ending at 0."""
        return self.dt * np.arange(-(self.obs_steps - 1), 1, dtype=np.float64)


class LatentParams(BaseModel):
    """Decoded latent sample read as (a_x [m/s^2], lambda [m], stretch mu = exp(z3))."""

    model_config = ConfigDict(frozen=True, populate_by_name=True)

    a_x: float
    lam: float = Field(alias="lambda")
    stretch: float

    @field_validator("stretch")
    @classmethod
    def _positive(cls, v: float) -> float:
        # Non-finite values pass through for the watchdog to reject.
        if v <= 0:
            raise ValueError("stretch must be strictly positive")
        return v

    @classmethod
    def from_latent(cls, z) -> "LatentParams":
        z = np.asarray(z, dtype=np.float64)
        return cls(a_x=float(z[0]), lam=float(z[1]), stretch=float(np.exp(z[2])))

    def to_latent(self) -> np.ndarray:
        return np.array([self.a_x, self.lam, math.log(self.stretch)])


class LatentGaussian(BaseModel):
    """Encoder output: mean and std of q(z|x), shape (3,) or (B, 3)."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    mean: FloatArray
    std: FloatArray

    @model_validator(mode="after")
    def _check(self) -> "LatentGaussian":
        if self.mean.shape != self.std.shape or self.mean.shape[-1] != LATENT_DIM:
            raise ValueError(f"mean/std must share a (..., {LATENT_DIM}) shape, got {self.mean.shape} and {self.std.shape}")
        if not (np.all(np.isfinite(self.mean)) and np.all(np.isfinite(self.std))):
            raise ValueError("latent gaussian must be finite")
        if np.any(self.std <= 0):
            raise ValueError("std must be strictly positive")
        return self


class Trajectory(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    xs: FloatArray
    ys: FloatArray
    grid: TimeGrid

    @model_validator(mode="after")
    def _check(self) -> "Trajectory":
        p = self.grid.pred_steps
        if self.xs.shape != (p,) or self.ys.shape != (p,):
            raise ValueError(f"trajectory needs {p} points per axis, got {self.xs.shape} / {self.ys.shape}")
        return self

    def as_matrix(self) -> np.ndarray:
        return np.column_stack([self.xs, self.ys])


class Scenario(BaseModel):
    """
    One sample: target velocities xi_0 (O x 2), neighbor observations xi_1..xi_N
    (N x O x 4, relative x, y, vx, vy) and the future target path C (P x 2).
    """

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    scenario_id: str
    target_obs: FloatArray
    neighbor_obs: FloatArray
    target_future: FloatArray
    label: Optional[ManeuverClass] = None
    # Generating parameters, synthetic data only.
    truth: Optional[LatentParams] = None

    @model_validator(mode="after")
    def _check(self) -> "Scenario":
        if self.target_obs.ndim != 2 or self.target_obs.shape[1] != 2:
            raise ValueError(f"target_obs must be O x 2, got {self.target_obs.shape}")
        o = self.target_obs.shape[0]
        if self.neighbor_obs.ndim != 3 or self.neighbor_obs.shape[1:] != (o, 4):
            raise ValueError(f"neighbor_obs must be N x {o} x 4, got {self.neighbor_obs.shape}")
        if self.target_future.ndim != 2 or self.target_future.shape[1] != 2:
            raise ValueError(f"target_future must be P x 2, got {self.target_future.shape}")
        for name in ("target_obs", "neighbor_obs", "target_future"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} contains non-finite values")
        return self

    @property
    def obs_steps(self) -> int:
        return self.target_obs.shape[0]

    @property
    def pred_steps(self) -> int:
        return self.target_future.shape[0]

    @property
    def neighbor_count(self) -> int:
        return self.neighbor_obs.shape[0]

    @property
    def v0(self) -> np.ndarray:
        """Most recent absolute target velocity (v_x, v_y) before the prediction."""
        return self.target_obs[-1]

    def observation_matrix(self) -> np.ndarray:
        """Stacked X = [xi_0, xi_1, ..., xi_N] of shape O x (2 + 4N)."""
        return np.hstack([self.target_obs, *self.neighbor_obs])

    def check_grid(self, grid: TimeGrid) -> None:
        if self.obs_steps != grid.obs_steps or self.pred_steps != grid.pred_steps:
            raise ConfigurationError(
                f"scenario {self.scenario_id} has O={self.obs_steps}, P={self.pred_steps}; "
                f"grid expects O={grid.obs_steps}, P={grid.pred_steps}"
            )


class Dataset(BaseModel):
    model_config = ConfigDict(frozen=True)

    scenarios: tuple[Scenario, ...] = ()
    grid: TimeGrid = TimeGrid()
    split_seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _check(self) -> "Dataset":
        for scenario in self.scenarios:
            scenario.check_grid(self.grid)
        return self

    def __len__(self) -> int:
        return len(self.scenarios)

    def label_counts(self) -> dict[str, int]:
        counts = {str(c): 0 for c in MANEUVER_ORDER}
        counts["?"] = 0
        for scenario in self.scenarios:
            counts[str(scenario.label) if scenario.label else "?"] += 1
        return counts


class EncoderConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    target_hidden: int = Field(default=8, ge=1)
    neighbor_hidden: int = Field(default=16, ge=1)
    neighbor_count: int = Field(default=8, ge=0)
    share_neighbor_lstm: bool = True
    fnn_dims: tuple[int, ...] = (64, 64, 18)

    @property
    def fnn_input(self) -> int:
        return self.target_hidden + self.neighbor_count * self.neighbor_hidden


class LearnedDecoderConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    expansion_dims: tuple[int, ...] = (16, 64)
    lstm_hidden: int = Field(default=125, ge=1)
    # "single": the expanded vector is one LSTM step; "repeat": it is fed for P steps.
    unroll: Literal["single", "repeat"] = "single"


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    lr: float = Field(default=0.001, gt=0)
    epochs: int = Field(default=5, ge=1)
    batch_size: int = Field(default=64, ge=1)
    kl_weight: float = Field(default=1.0, ge=0)
    seed: int = Field(default=0, ge=0)
    # Elementwise clip magnitude applied before each step; None disables.
    grad_clip: Optional[float] = Field(default=10.0, gt=0)


class LossBreakdown(BaseModel):
    model_config = ConfigDict(frozen=True)

    total: float
    reconstruction: float
    kl: float
    kl_weight: float

    @model_validator(mode="after")
    def _sums(self) -> "LossBreakdown":
        values = (self.total, self.reconstruction, self.kl, self.kl_weight)
        if not all(math.isfinite(v) for v in values):
            raise ValueError("loss breakdown must be finite")
        expected = self.reconstruction + self.kl_weight * self.kl
        if not math.isclose(self.total, expected, rel_tol=1e-9, abs_tol=1e-12):
            raise ValueError(f"total {self.total} != reconstruction + kl_weight*kl = {expected}")
        return self


class ClassifierThresholds(BaseModel):
    model_config = ConfigDict(frozen=True)

    t_lambda: float = Field(default=0.85, gt=0)
    t_mu: float = Field(default=0.25, gt=0)


class WatchdogRuleSet(BaseModel):
    """Plausibility bounds on interpretable latents. Only lambda_abs_max is an established limit."""

    model_config = ConfigDict(frozen=True)

    lambda_abs_max: float = Field(default=8.0, gt=0)
    stretch_min: float = 1e-4
    stretch_max: float = 10.0
    a_x_min: float = -5.0
    a_x_max: float = 5.0

    @model_validator(mode="after")
    def _ranges(self) -> "WatchdogRuleSet":
        if not self.stretch_min < self.stretch_max:
            raise ValueError("stretch range is empty")
        if not self.a_x_min < self.a_x_max:
            raise ValueError("a_x range is empty")
        return self


class GeneratorConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    count: int = Field(ge=1)
    # Fractions for (LL, KL, LR).
    class_mix: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    noise_sigma: float = Field(default=0.0, ge=0)
    seed: int = Field(default=0, ge=0)
    neighbor_presence: float = Field(default=0.6, ge=0, le=1)

    @field_validator("class_mix")
    @classmethod
    def _mix_sums_to_one(cls, v: tuple[float, float, float]) -> tuple[float, float, float]:
        if any(x < 0 for x in v) or not math.isclose(sum(v), 1.0, abs_tol=1e-9):
            raise ValueError(f"class_mix must be non-negative and sum to 1, got {v}")
        return v


class DataSource(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal["canonical", "adapter", "synthetic"] = "canonical"
    path: Optional[str] = None
    column_map: Optional[str] = None
    stride: Optional[int] = Field(default=None, ge=1)
    generator: Optional[GeneratorConfig] = None


class RunConfig(BaseModel):
    """Everything needed to reproduce one CLI run; written as run_config.json."""

    command: str
    model: Optional[ModelKind] = None
    models: list[ModelKind] = []
    grid: TimeGrid = TimeGrid()
    train: TrainConfig = TrainConfig()
    encoder: EncoderConfig = EncoderConfig()
    decoder: LearnedDecoderConfig = LearnedDecoderConfig()
    data: DataSource = DataSource()
    thresholds: ClassifierThresholds = ClassifierThresholds()
    rules: WatchdogRuleSet = WatchdogRuleSet()
    checkpoints: dict[str, str] = {}
    train_fraction: float = Field(default=2 / 3, gt=0, lt=1)
    error_mode: Literal["final", "mean", "max"] = "final"
    longitudinal: bool = False
    output_dir: str = "output"
    seed: int = Field(default=0, ge=0)
    # predict
    mode: Literal["eval", "sample"] = "eval"
    # classify / validate input
    latents: Optional[str] = None
    # fit histograms
    bins: int = Field(default=40, ge=1)
    label_filter: Optional[ManeuverClass] = None
    # gradcheck
    gradcheck_samples: int = Field(default=2, ge=1)
    gradcheck_tolerance: float = Field(default=1e-4, gt=0)
