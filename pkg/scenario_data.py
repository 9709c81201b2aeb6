"""
Scenario data: file format, tracks adapter, synthetic generator, splitting.

Responsibilities:
- Canonical text format (write_canonical / load_canonical). Header
  `DVAE-SCN v1 O=<O> P=<P> N=<N> dt=<dt>`, then per scenario a
  `#scenario <id> label=<LL|KL|LR|?>` line (optionally followed by
  `a_x=.. lambda=.. stretch=..` generator tokens), O observation rows of 2+4N reals
  and P future rows of 2 reals. Floats are written with repr() so a round trip is exact.
- highD-style tracks CSV -> scenarios via a column map (adapt_tracks_csv), with the
  per-window frame change in transform_to_target_frame.
- Synthetic scenarios drawn from the decoder's own motion family (generate_synthetic).
- Seeded train/test split and stacking into batch arrays.

Neighbor slots form a 3x3 grid around the target minus its own cell, in NEIGHBOR_SLOTS
order. Empty slots carry a constant sentinel row (see sentinel_row).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from pydantic import ValidationError
from scipy.special import expit

from descriptive_decoder import lateral_curve, lateral_rate, predict_longitudinal
from errors import ConfigurationError, DataError, ScenarioLoadError
from models import (
    MANEUVER_ORDER,
    Dataset,
    GeneratorConfig,
    LatentParams,
    ManeuverClass,
    Scenario,
    TimeGrid,
)

logger = logging.getLogger(__name__)

FORMAT_TAG = "DVAE-SCN v1"

NEIGHBOR_SLOTS = (
    "front_left",
    "front",
    "front_right",
    "left",
    "right",
    "rear_left",
    "rear",
    "rear_right",
)
# (longitudinal, lateral) cell of each slot: +1 = front / left lane.
SLOT_CELLS = {
    "front_left": (1, 1),
    "front": (1, 0),
    "front_right": (1, -1),
    "left": (0, 1),
    "right": (0, -1),
    "rear_left": (-1, 1),
    "rear": (-1, 0),
    "rear_right": (-1, -1),
}
CELL_SLOTS = {cell: slot for slot, cell in SLOT_CELLS.items()}

ABSENT_GAP = 200.0
ALONGSIDE_GAP = 5.0
LANE_WIDTH = 3.75


def sentinel_row(slot: str, lane_width: float = LANE_WIDTH) -> np.ndarray:
    """Fill row for an empty slot: far away toward the empty cell, zero relative velocity."""
    lon, lat = SLOT_CELLS[slot]
    if lon == 0:
        return np.array([0.0, lat * ABSENT_GAP, 0.0, 0.0])
    return np.array([lon * ABSENT_GAP, lat * lane_width, 0.0, 0.0])


def _absent(slot: str, steps: int, lane_width: float = LANE_WIDTH) -> np.ndarray:
    return np.tile(sentinel_row(slot, lane_width), (steps, 1))


# --- Canonical format ---

def _fmt(value: float) -> str:
    return repr(float(value))


def write_canonical(ds: Dataset, path: str | Path) -> None:
    grid = ds.grid
    n = ds.scenarios[0].neighbor_count if ds.scenarios else len(NEIGHBOR_SLOTS)
    lines = [f"{FORMAT_TAG} O={grid.obs_steps} P={grid.pred_steps} N={n} dt={_fmt(grid.dt)}"]
    for sc in ds.scenarios:
        if not sc.scenario_id or any(ch.isspace() for ch in sc.scenario_id):
            raise ConfigurationError(f"scenario id {sc.scenario_id!r} must be non-empty without whitespace")
        if sc.neighbor_count != n:
            raise ConfigurationError(f"scenario {sc.scenario_id} has {sc.neighbor_count} neighbors, file uses {n}")
        head = f"#scenario {sc.scenario_id} label={sc.label.value if sc.label else '?'}"
        if sc.truth is not None:
            head += f" a_x={_fmt(sc.truth.a_x)} lambda={_fmt(sc.truth.lam)} stretch={_fmt(sc.truth.stretch)}"
        lines.append(head)
        lines.extend(",".join(_fmt(v) for v in row) for row in sc.observation_matrix())
        lines.extend(",".join(_fmt(v) for v in row) for row in sc.target_future)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_header(line: str) -> dict[str, str]:
    if not line.startswith(FORMAT_TAG):
        raise ValueError(f"expected header starting with {FORMAT_TAG!r}")
    fields = dict(tok.split("=", 1) for tok in line[len(FORMAT_TAG):].split() if "=" in tok)
    missing = [k for k in ("O", "P", "N", "dt") if k not in fields]
    if missing:
        raise ValueError(f"header lacks {missing}")
    return fields


def _parse_scenario_line(line: str) -> tuple[str, ManeuverClass | None, LatentParams | None]:
    tokens = line.split()
    if len(tokens) < 2:
        raise ValueError("scenario line needs an id")
    sid = tokens[1]
    extra = dict(tok.split("=", 1) for tok in tokens[2:] if "=" in tok)
    raw_label = extra.get("label", "?")
    label = None if raw_label == "?" else ManeuverClass(raw_label)
    truth = None
    if {"a_x", "lambda", "stretch"} <= extra.keys():
        truth = LatentParams(a_x=float(extra["a_x"]), lam=float(extra["lambda"]), stretch=float(extra["stretch"]))
    return sid, label, truth


def _parse_row(text: str, width: int, lineno: int, offenders: list) -> np.ndarray | None:
    tokens = text.split(",")
    if len(tokens) != width:
        offenders.append((lineno, None, f"expected {width} columns, got {len(tokens)}"))
        return None
    values = np.empty(width)
    ok = True
    for col, tok in enumerate(tokens, start=1):
        try:
            values[col - 1] = float(tok)
        except ValueError:
            offenders.append((lineno, col, f"not a number: {tok.strip()!r}"))
            ok = False
            continue
        if not math.isfinite(values[col - 1]):
            offenders.append((lineno, col, f"non-finite value {tok.strip()}"))
            ok = False
    return values if ok else None


def load_canonical(path: str | Path, grid: TimeGrid, split_seed: int = 0) -> Dataset:
    """Read a canonical scenario file; every problem is collected before raising."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"scenario file not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ScenarioLoadError(str(path), [(1, None, "missing header")])
    try:
        header = _parse_header(lines[0])
        obs, pred, n = int(header["O"]), int(header["P"]), int(header["N"])
        dt = float(header["dt"])
    except ValueError as e:
        raise ScenarioLoadError(str(path), [(1, None, str(e))]) from e
    if obs != grid.obs_steps or pred != grid.pred_steps or not math.isclose(dt, grid.dt, rel_tol=1e-12):
        raise ScenarioLoadError(
            str(path),
            [(1, None, f"file grid O={obs} P={pred} dt={dt} differs from O={grid.obs_steps} P={grid.pred_steps} dt={grid.dt}")],
        )

    width = 2 + 4 * n
    offenders: list[tuple[int, int | None, str]] = []
    scenarios: list[Scenario] = []
    i = 1
    while i < len(lines):
        lineno = i + 1
        line = lines[i]
        if not line.strip():
            i += 1
            continue
        if not line.startswith("#scenario"):
            offenders.append((lineno, None, "expected a '#scenario' line"))
            i += 1
            continue
        try:
            sid, label, truth = _parse_scenario_line(line)
        except (ValueError, ValidationError) as e:
            offenders.append((lineno, None, f"bad scenario line: {e}"))
            sid, label, truth = f"line{lineno}", None, None
        block = lines[i + 1 : i + 1 + obs + pred]
        if len(block) < obs + pred:
            offenders.append((lineno, None, f"scenario {sid} has {len(block)} rows, expected {obs + pred}"))
            break
        before = len(offenders)
        rows = [
            _parse_row(text, width if k < obs else 2, lineno + 1 + k, offenders)
            for k, text in enumerate(block)
        ]
        if len(offenders) == before:
            x = np.array(rows[:obs])
            try:
                scenarios.append(
                    Scenario(
                        scenario_id=sid,
                        target_obs=x[:, :2],
                        neighbor_obs=x[:, 2:].reshape(obs, n, 4).transpose(1, 0, 2),
                        target_future=np.array(rows[obs:]),
                        label=label,
                        truth=truth,
                    )
                )
            except ValidationError as e:
                offenders.append((lineno, None, f"scenario {sid}: {e}"))
        i += 1 + obs + pred

    if offenders:
        raise ScenarioLoadError(str(path), offenders)
    logger.info("Loaded %d scenarios from %s", len(scenarios), path)
    return Dataset(scenarios=tuple(scenarios), grid=grid, split_seed=split_seed)


# --- Tracks adapter ---

def read_tracks(path: str | Path, column_map: Mapping[str, str]) -> pd.DataFrame:
    """Load a tracks CSV and rename mapped source columns to the canonical field names."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"tracks file not found: {path}")
    available = set(pd.read_csv(path, nrows=0).columns)
    missing = sorted(src for src in column_map.values() if src not in available)
    if missing:
        raise ConfigurationError(f"{path}: mapped columns {missing} not present")
    df = pd.read_csv(path, usecols=list(column_map.values()))
    df = df.rename(columns={src: field for field, src in column_map.items()})
    numeric = df[["x", "y", "xVelocity", "yVelocity"]].to_numpy(dtype=np.float64)
    if not np.all(np.isfinite(numeric)):
        raise DataError(f"{path}: non-finite position or velocity values")
    df = df.astype({"frame": "int64", "id": "int64", "laneId": "int64"})
    return df.sort_values(["id", "frame"], kind="stable").reset_index(drop=True)


def _index_tracks(tracks: pd.DataFrame) -> pd.DataFrame:
    if isinstance(tracks.index, pd.MultiIndex):
        return tracks
    return tracks.set_index(["id", "frame"]).sort_index()


def relative_row(target: np.ndarray, other: np.ndarray, direction: float, lat_sign: float) -> np.ndarray:
    """
    Neighbor row (x_rel, y_rel, vx_rel, vy_rel) in the target frame; inputs are global
    (x, y, xVelocity, yVelocity) rows.
    """
    d = np.asarray(other, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return d * np.array([direction, lat_sign, direction, lat_sign])


def transform_to_target_frame(
    tracks: pd.DataFrame,
    target_id: int,
    t0_frame: int,
    grid: TimeGrid,
    *,
    lane_width: float = LANE_WIDTH,
    y_down: bool = True,
    scenario_id: str | None = None,
) -> Scenario:
    """
    Cut the window ending its observation at t0_frame and express it around the target.

    The driving direction is the sign of the target's longitudinal velocity at t_0; with
    image coordinates (y_down) the lateral axis is flipped so that left is positive for
    both carriageways. Neighbors are same-direction vehicles present at t_0, one (the
    longitudinally nearest) per slot; frames where a chosen neighbor is missing use the
    slot's sentinel row.
    """
    indexed = _index_tracks(tracks)
    obs, pred = grid.obs_steps, grid.pred_steps
    frames = np.arange(t0_frame - obs + 1, t0_frame + pred + 1)
    cols = ["x", "y", "xVelocity", "yVelocity"]

    try:
        target = indexed.loc[target_id]
    except KeyError:
        raise DataError(f"vehicle {target_id} not in tracks") from None
    window = target.reindex(frames)
    if window[cols].isna().any().any():
        gaps = frames[window["x"].isna().to_numpy()]
        raise DataError(f"vehicle {target_id} missing at frames {gaps[:5].tolist()} of window ending {t0_frame}")
    states = window[cols].to_numpy(dtype=np.float64)
    lane0 = int(window["laneId"].iloc[obs - 1])
    at_t0 = states[obs - 1]

    direction = 1.0 if at_t0[2] >= 0 else -1.0
    lat_sign = -direction if y_down else direction
    flip = np.array([direction, lat_sign])

    target_obs = states[:obs, 2:4] * flip
    target_future = (states[obs:, 0:2] - at_t0[0:2]) * flip

    # Slot assignment at t_0.
    chosen: dict[str, tuple[float, int]] = {}
    present = indexed.xs(t0_frame, level="frame")
    for other_id, row in present.iterrows():
        if other_id == target_id or (row["xVelocity"] >= 0) != (direction > 0):
            continue
        lane_step = int(np.sign(lat_sign * (row["laneId"] - lane0)))
        if abs(int(row["laneId"]) - lane0) > 1:
            continue
        dx = direction * (row["x"] - at_t0[0])
        if lane_step == 0:
            lon = 1 if dx >= 0 else -1
        else:
            lon = 0 if abs(dx) <= ALONGSIDE_GAP else (1 if dx > 0 else -1)
        slot = CELL_SLOTS[(lon, lane_step)]
        if slot not in chosen or abs(dx) < chosen[slot][0]:
            chosen[slot] = (abs(dx), int(other_id))

    neighbor_obs = np.empty((len(NEIGHBOR_SLOTS), obs, 4))
    obs_frames = frames[:obs]
    for j, slot in enumerate(NEIGHBOR_SLOTS):
        rows = _absent(slot, obs, lane_width)
        if slot in chosen:
            other = indexed.loc[chosen[slot][1]].reindex(obs_frames)[cols].to_numpy(dtype=np.float64)
            have = ~np.isnan(other).any(axis=1)
            rows[have] = relative_row(states[:obs][have], other[have], direction, lat_sign)
        neighbor_obs[j] = rows

    return Scenario(
        scenario_id=scenario_id or f"v{target_id}-f{t0_frame}",
        target_obs=target_obs,
        neighbor_obs=neighbor_obs,
        target_future=target_future,
    )


def _consecutive_runs(frames: np.ndarray) -> list[tuple[int, int]]:
    """[start, end) index ranges of strictly consecutive frame numbers."""
    if len(frames) == 0:
        return []
    breaks = np.flatnonzero(np.diff(frames) != 1) + 1
    edges = [0, *breaks.tolist(), len(frames)]
    return list(zip(edges[:-1], edges[1:]))


def adapt_tracks_csv(
    path: str | Path,
    column_map: Mapping[str, str],
    grid: TimeGrid,
    *,
    y_down: bool = True,
    lane_width: float = LANE_WIDTH,
    stride: int | None = None,
) -> Dataset:
    """
    Cut every vehicle's consecutive-frame runs into windows of O+P frames (one frame per
    dt) starting every `stride` frames (default O+P, i.e. non-overlapping).
    """
    tracks = read_tracks(path, column_map)
    indexed = _index_tracks(tracks)
    span = grid.obs_steps + grid.pred_steps
    step = stride or span
    scenarios: list[Scenario] = []
    short, rejected = 0, 0
    for vid, group in tracks.groupby("id", sort=True):
        frames = group["frame"].to_numpy()
        for start, end in _consecutive_runs(frames):
            if end - start < span:
                short += 1
                logger.debug("Vehicle %s: run of %d frames is shorter than %d", vid, end - start, span)
                continue
            for s in range(start, end - span + 1, step):
                t0 = int(frames[s + grid.obs_steps - 1])
                try:
                    scenarios.append(
                        transform_to_target_frame(indexed, int(vid), t0, grid, lane_width=lane_width, y_down=y_down)
                    )
                except DataError as e:
                    rejected += 1
                    logger.debug("Skipping window: %s", e)
    logger.info("Adapted %d windows from %s (%d short runs, %d rejected)", len(scenarios), path, short, rejected)
    return Dataset(scenarios=tuple(scenarios), grid=grid)


# --- Synthetic generator ---

LAMBDA_RANGES = {
    ManeuverClass.LL: (3.0, 4.2),
    ManeuverClass.KL: (-0.3, 0.3),
    ManeuverClass.LR: (-4.2, -3.0),
}
STRETCH_RANGES = {
    ManeuverClass.LL: (0.6, 1.6),
    ManeuverClass.KL: (0.01, 0.2),
    ManeuverClass.LR: (0.6, 1.6),
}
V0X_RANGE = (20.0, 40.0)
A_X_RANGE = (-2.0, 2.0)


def allocate_labels(count: int, class_mix: Sequence[float]) -> list[ManeuverClass]:
    """Largest-remainder allocation of `count` labels in MANEUVER_ORDER (unshuffled)."""
    raw = np.asarray(class_mix, dtype=np.float64) * count
    base = np.floor(raw + 1e-9).astype(int)
    leftover = count - int(base.sum())
    order = np.argsort(-(raw - base), kind="stable")
    for k in order[:leftover]:
        base[k] += 1
    return [cls for cls, n in zip(MANEUVER_ORDER, base) for _ in range(n)]


def _synthetic_scenario(
    rng: np.random.Generator,
    scenario_id: str,
    label: ManeuverClass,
    cfg: GeneratorConfig,
    grid: TimeGrid,
) -> Scenario:
    v0x = rng.uniform(*V0X_RANGE)
    a_x = rng.uniform(*A_X_RANGE)
    lam = rng.uniform(*LAMBDA_RANGES[label])
    mu = rng.uniform(*STRETCH_RANGES[label])
    truth = LatentParams(a_x=a_x, lam=lam, stretch=mu)

    future = np.column_stack([
        predict_longitudinal(a_x, v0x, grid),
        lateral_curve(lam, mu, grid.times, grid.t_pred),
    ])

    # Back-simulate the observation window along the same motion.
    t = grid.obs_times
    target_x = v0x * t + 0.5 * a_x * t * t
    target_y = lateral_curve(lam, mu, t, grid.t_pred)
    target_vx = v0x + a_x * t
    target_vy = lateral_rate(lam, mu, t, grid.t_pred)
    # Offset from the center of the lane the target starts in; a lane change has already
    # drifted toward the marking at t_0, so neighbors sit closer on that side.
    lane_offset = target_y + lam * expit(-0.5 * mu * grid.t_pred)
    target_obs = np.column_stack([target_vx, target_vy])

    changing = label is not ManeuverClass.KL
    neighbor_obs = np.empty((len(NEIGHBOR_SLOTS), grid.obs_steps, 4))
    for j, slot in enumerate(NEIGHBOR_SLOTS):
        lon, lat = SLOT_CELLS[slot]
        # Draws happen for every slot so presence does not shift the random stream.
        present = rng.uniform() < cfg.neighbor_presence
        gap = rng.uniform(10.0, 60.0) if lon else rng.uniform(-ALONGSIDE_GAP, ALONGSIDE_GAP)
        if slot == "front":
            dv = -rng.uniform(2.0, 6.0) if changing else rng.uniform(-1.0, 2.0)
        else:
            dv = rng.uniform(-3.0, 3.0)
        if changing and slot == "front":
            present = True
        if not present:
            neighbor_obs[j] = _absent(slot, grid.obs_steps)
            continue
        vn = v0x + dv
        xn = (lon * gap if lon else gap) + vn * t
        neighbor_obs[j] = np.column_stack([
            xn - target_x,
            lat * LANE_WIDTH - lane_offset,
            vn - target_vx,
            -target_vy,
        ])

    if cfg.noise_sigma > 0:
        neighbor_obs[:, :, :2] += rng.normal(0.0, cfg.noise_sigma, size=neighbor_obs[:, :, :2].shape)
        future = future + rng.normal(0.0, cfg.noise_sigma, size=future.shape)

    return Scenario(
        scenario_id=scenario_id,
        target_obs=target_obs,
        neighbor_obs=neighbor_obs,
        target_future=future,
        label=label,
        truth=truth,
    )


def generate_synthetic(
    count: int,
    class_mix: Sequence[float] = (1 / 3, 1 / 3, 1 / 3),
    noise_sigma: float = 0.0,
    seed: int = 0,
    grid: TimeGrid = TimeGrid(),
    neighbor_presence: float = 0.6,
) -> Dataset:
    """
    Scenarios whose futures follow the decoder's motion family exactly (before noise):
    v0x ~ U[20, 40] m/s, a_x ~ U[-2, 2] m/s^2, per-class lambda and stretch ranges.
    class_mix is (LL, KL, LR).
    """
    try:
        cfg = GeneratorConfig(
            count=count,
            class_mix=tuple(class_mix),
            noise_sigma=noise_sigma,
            seed=seed,
            neighbor_presence=neighbor_presence,
        )
    except ValidationError as e:
        raise ConfigurationError(f"invalid generator parameters: {e}") from e

    rng = np.random.default_rng(cfg.seed)
    labels = allocate_labels(cfg.count, cfg.class_mix)
    labels = [labels[k] for k in rng.permutation(len(labels))]
    scenarios = tuple(
        _synthetic_scenario(rng, f"syn{cfg.seed}-{k:06d}", label, cfg, grid)
        for k, label in enumerate(labels)
    )
    ds = Dataset(scenarios=scenarios, grid=grid, split_seed=cfg.seed)
    logger.info("Generated %d synthetic scenarios: %s", len(ds), ds.label_counts())
    return ds


# --- Splitting and batching ---

def split_sizes(n: int, train_fraction: float) -> tuple[int, int]:
    n_test = math.floor(n * (1.0 - train_fraction) + 1e-9)
    return n - n_test, n_test


def split_dataset(ds: Dataset, train_fraction: float, seed: int | None = None) -> tuple[Dataset, Dataset]:
    """Seeded shuffle then cut; seed defaults to the dataset's split_seed."""
    if not 0.0 < train_fraction < 1.0:
        raise ConfigurationError(f"train_fraction must be in (0, 1), got {train_fraction}")
    seed = ds.split_seed if seed is None else seed
    n_train, _ = split_sizes(len(ds), train_fraction)
    order = np.random.default_rng(seed).permutation(len(ds))
    train = tuple(ds.scenarios[k] for k in order[:n_train])
    test = tuple(ds.scenarios[k] for k in order[n_train:])
    return (
        Dataset(scenarios=train, grid=ds.grid, split_seed=seed),
        Dataset(scenarios=test, grid=ds.grid, split_seed=seed),
    )


@dataclass(frozen=True)
class ScenarioBatch:
    target_obs: np.ndarray  # (B, O, 2)
    neighbor_obs: np.ndarray  # (B, N, O, 4)
    target_future: np.ndarray  # (B, P, 2)

    @property
    def v0x(self) -> np.ndarray:
        return self.target_obs[:, -1, 0]

    def __len__(self) -> int:
        return self.target_obs.shape[0]

    def take(self, idx) -> "ScenarioBatch":
        return ScenarioBatch(self.target_obs[idx], self.neighbor_obs[idx], self.target_future[idx])


def stack_scenarios(scenarios: Sequence[Scenario]) -> ScenarioBatch:
    if not scenarios:
        raise DataError("no samples")
    return ScenarioBatch(
        target_obs=np.stack([s.target_obs for s in scenarios]),
        neighbor_obs=np.stack([s.neighbor_obs for s in scenarios]),
        target_future=np.stack([s.target_future for s in scenarios]),
    )
