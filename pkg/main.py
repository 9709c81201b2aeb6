"""
Command-line entry point.

Subcommands: gen, train, eval, predict, fit, classify, validate, gradcheck.

Every run writes its resolved RunConfig to <output-dir>/run_config.json; passing that
file back with --config replaces all other flags and reproduces the run. run.log in the
same directory is the only output carrying timestamps.

Exit codes: 0 success, 2 usage or configuration, 3 data, 4 numeric failure.
"""

import argparse
import asyncio
import logging
import sys
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
from pydantic import ValidationError

import config
from errors import ConfigurationError, DataError, DvaeError, NumericError, UsageError
from evaluation import (
    confusion,
    ecdf,
    lambda_error_stats,
    lateral_error,
    percentile,
    write_confusion_csv,
    write_ecdf_csv,
    write_lambda_stats_csv,
)
from latent_tools import CurveFit, classify, fit_scenarios, reference_histogram, validate
from losses import objective_op
from models import (
    Dataset,
    DataSource,
    EncoderConfig,
    GeneratorConfig,
    LatentParams,
    LearnedDecoderConfig,
    ManeuverClass,
    ModelKind,
    RunConfig,
    Scenario,
    TimeGrid,
    TrainConfig,
)
from nn_core import GradientTape, grad_check, load_checkpoint, save_checkpoint
from predictors import Prediction, build_store, check_store, forward, predict, predict_batch, train
from scenario_data import adapt_tracks_csv, generate_synthetic, load_canonical, split_dataset, stack_scenarios, write_canonical

logger = logging.getLogger(__name__)

SCENARIO_FILE = "scenarios.scn"
LATENT_COLUMNS = ["scenario_id", "label", "a_x", "lambda", "stretch"]
RULE_NAMES = ("lambda_abs_max", "stretch_range", "a_x_range", "finite")


# --- Data ---

def load_data(cfg: RunConfig) -> Dataset:
    src = cfg.data
    if src.kind == "synthetic":
        g = src.generator
        if g is None:
            raise ConfigurationError("synthetic data source needs generator parameters")
        return generate_synthetic(g.count, g.class_mix, g.noise_sigma, g.seed, cfg.grid, g.neighbor_presence)
    if not src.path:
        raise ConfigurationError("--data is required")
    if src.kind == "adapter":
        columns, options = config.load_column_map(src.column_map)
        opts = config.adapter_options(options)
        ds = adapt_tracks_csv(
            src.path, columns, cfg.grid, y_down=opts.y_down, lane_width=opts.lane_width, stride=src.stride or opts.stride
        )
        return ds.model_copy(update={"split_seed": cfg.seed})
    return load_canonical(src.path, cfg.grid, split_seed=cfg.seed)


def load_model(cfg: RunConfig, kind: ModelKind):
    """Parameter store for `kind` from cfg.checkpoints (None for CV)."""
    if kind is ModelKind.CV:
        return None
    path = cfg.checkpoints.get(kind.value)
    if not path:
        raise ConfigurationError(f"no checkpoint given for {kind.value}")
    if not Path(path).is_file():
        raise DataError(f"checkpoint not found: {path}")
    stored_kind, store = load_checkpoint(path)
    if stored_kind != kind.value:
        raise ConfigurationError(f"{path} holds a {stored_kind} model, not {kind.value}")
    check_store(kind, store)
    return store


def _chunks(items: Sequence, size: int) -> list[Sequence]:
    return [items[i : i + size] for i in range(0, len(items), size)]


# --- Async fan-out ---

async def run_predictions(kind: ModelKind, params, scenarios: Sequence[Scenario], cfg: RunConfig) -> list[Prediction]:
    """Eval-mode predictions in worker threads, merged back in scenario order."""
    chunk = config.get_settings().eval_chunk
    parts = await asyncio.gather(
        *(asyncio.to_thread(predict_batch, kind, params, part, cfg.grid, cfg.decoder) for part in _chunks(scenarios, chunk))
    )
    return [p for part in parts for p in part]


async def run_all_predictions(models: dict, scenarios: Sequence[Scenario], cfg: RunConfig) -> dict:
    results = await asyncio.gather(*(run_predictions(kind, params, scenarios, cfg) for kind, params in models.items()))
    return dict(zip(models, results))


async def run_fits(scenarios: Sequence[Scenario], grid: TimeGrid) -> list[CurveFit]:
    chunk = config.get_settings().eval_chunk
    parts = await asyncio.gather(*(asyncio.to_thread(fit_scenarios, part, grid) for part in _chunks(scenarios, chunk)))
    return [f for part in parts for f in part]


# --- Commands ---

def cmd_gen(cfg: RunConfig) -> int:
    ds = load_data(cfg)
    out = Path(cfg.output_dir) / SCENARIO_FILE
    write_canonical(ds, out)
    counts = ds.label_counts()
    print(f"wrote {len(ds)} scenarios to {out}")
    for name in ("LL", "KL", "LR"):
        print(f"  {name}: {counts[name]}")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    kind = cfg.model
    if kind is None:
        raise ConfigurationError("--model is required")
    if not kind.trainable:
        raise UsageError("CV has no training")
    ds = load_data(cfg)
    train_ds, _ = split_dataset(ds, cfg.train_fraction, seed=cfg.seed)
    store, logs = train(kind, train_ds, cfg.train, cfg.encoder, cfg.decoder)
    out = Path(cfg.output_dir)
    ckpt = out / f"{kind.value.lower()}.ckpt"
    save_checkpoint(store, ckpt, kind.value)
    pd.DataFrame([log.model_dump() for log in logs]).to_csv(out / "loss_log.csv", index=False)
    logger.info("Saved %s (%d parameters) to %s", kind.value, store.num_parameters, ckpt)
    return 0


def _labels(scenarios: Sequence[Scenario]) -> list[ManeuverClass] | None:
    labels = [sc.label for sc in scenarios]
    return None if any(label is None for label in labels) else labels


def cmd_eval(cfg: RunConfig) -> int:
    kinds = cfg.models or [ModelKind(k) for k in cfg.checkpoints] + [ModelKind.CV]
    models = {kind: load_model(cfg, kind) for kind in kinds}
    ds = load_data(cfg)
    _, test = split_dataset(ds, cfg.train_fraction, seed=cfg.seed)
    if len(test) == 0:
        raise DataError("no samples")
    scenarios = test.scenarios
    out = Path(cfg.output_dir)

    predictions = asyncio.run(run_all_predictions(models, scenarios, cfg))
    fits = asyncio.run(run_fits(scenarios, cfg.grid))
    labels = _labels(scenarios)
    ref_lambdas = [f.lam for f in fits]

    percentile_rows, lambda_stats, watchdog_rows = [], {}, []
    axes = [("lateral", False)] + ([("longitudinal", True)] if cfg.longitudinal else [])
    for kind, preds in predictions.items():
        name = kind.value.lower()
        for axis, longitudinal in axes:
            errors = [
                lateral_error(traj, sc.target_future, cfg.error_mode, longitudinal=longitudinal)
                for (traj, _), sc in zip(preds, scenarios)
            ]
            curve = ecdf(errors)
            suffix = "" if axis == "lateral" else "_longitudinal"
            write_ecdf_csv(curve, out / f"ecdf_{name}{suffix}.csv")
            p95 = percentile(curve, 0.95)
            percentile_rows.append({"model": kind.value, "axis": axis, "error_mode": cfg.error_mode, "n": curve.n, "p95": p95})
            logger.info("%s %s 95th percentile error: %.4f m", kind.value, axis, p95)

        latents = [lp for _, lp in preds]
        if not kind.descriptive or any(lp is None for lp in latents):
            continue
        if labels is not None:
            matrix = confusion(labels, [classify(lp, cfg.thresholds) for lp in latents])
            write_confusion_csv(matrix, out / f"confusion_{name}.csv")
            logger.info("%s classifier macro accuracy: %.3f", kind.value, matrix.accuracy)
        lambda_stats[kind.value] = lambda_error_stats([lp.lam for lp in latents], ref_lambdas)
        verdicts = [validate(lp, cfg.rules) for lp in latents]
        row = {"model": kind.value, "scenarios": len(verdicts), "rejected": sum(not v.accepted for v in verdicts)}
        for rule in RULE_NAMES:
            row[rule] = sum(rule in v.violations for v in verdicts)
        watchdog_rows.append(row)
        logger.info("%s watchdog: %d of %d rejected", kind.value, row["rejected"], row["scenarios"])

    pd.DataFrame(percentile_rows).to_csv(out / "percentiles.csv", index=False)
    if labels is not None:
        ref = confusion(labels, [classify(f.params(), cfg.thresholds) for f in fits])
        write_confusion_csv(ref, out / "confusion_reference.csv")
        logger.info("Reference-fit classifier macro accuracy: %.3f", ref.accuracy)
    if lambda_stats:
        write_lambda_stats_csv(lambda_stats, out / "lambda_errors.csv")
    if watchdog_rows:
        pd.DataFrame(watchdog_rows).to_csv(out / "watchdog.csv", index=False)
    return 0


def _latent_rows(scenarios: Sequence[Scenario], latents: Sequence[LatentParams]) -> pd.DataFrame:
    return pd.DataFrame(
        [
            {
                "scenario_id": sc.scenario_id,
                "label": sc.label.value if sc.label else "?",
                "a_x": lp.a_x,
                "lambda": lp.lam,
                "stretch": lp.stretch,
            }
            for sc, lp in zip(scenarios, latents)
        ],
        columns=LATENT_COLUMNS,
    )


def cmd_predict(cfg: RunConfig) -> int:
    kind = cfg.model
    if kind is None:
        raise ConfigurationError("--model is required")
    params = load_model(cfg, kind)
    ds = load_data(cfg)
    scenarios = ds.scenarios
    if cfg.mode == "sample":
        rng = np.random.default_rng(cfg.seed)
        preds = [predict(kind, params, sc, cfg.grid, "sample", rng, cfg.decoder) for sc in scenarios]
    else:
        preds = asyncio.run(run_predictions(kind, params, scenarios, cfg))

    out = Path(cfg.output_dir)
    steps = np.arange(1, cfg.grid.pred_steps + 1)
    frames = [
        pd.DataFrame({"scenario_id": sc.scenario_id, "step": steps, "t": cfg.grid.times, "x": traj.xs, "y": traj.ys})
        for (traj, _), sc in zip(preds, scenarios)
    ]
    trajectories = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=["scenario_id", "step", "t", "x", "y"])
    trajectories.to_csv(out / "trajectories.csv", index=False)
    if kind.descriptive:
        _latent_rows(scenarios, [lp for _, lp in preds]).to_csv(out / "latents.csv", index=False)
    logger.info("Predicted %d scenarios with %s", len(scenarios), kind.value)
    return 0


def cmd_fit(cfg: RunConfig) -> int:
    ds = load_data(cfg)
    fits = asyncio.run(run_fits(ds.scenarios, cfg.grid))
    out = Path(cfg.output_dir)
    table = _latent_rows(ds.scenarios, [f.params() for f in fits])
    table["residual_x"] = [f.residual_x for f in fits]
    table["residual_y"] = [f.residual_y for f in fits]
    table["degenerate"] = [f.degenerate for f in fits]
    table.to_csv(out / "fits.csv", index=False)
    hist = reference_histogram(ds, bins=cfg.bins, label_filter=cfg.label_filter, fits=fits)
    hist.to_csv(out / "histogram.csv", index=False)
    logger.info("Fitted %d tracks (%d degenerate)", len(fits), sum(f.degenerate for f in fits))
    return 0


def read_latents(path: str | None) -> pd.DataFrame:
    if not path:
        raise ConfigurationError("--latents is required")
    if not Path(path).is_file():
        raise DataError(f"latents file not found: {path}")
    df = pd.read_csv(path, dtype={"scenario_id": str, "label": str}, keep_default_na=False)
    missing = [c for c in ("scenario_id", "lambda", "stretch") if c not in df.columns]
    if missing:
        raise DataError(f"{path}: latents file lacks columns {missing}")
    if "a_x" not in df.columns:
        df["a_x"] = 0.0
    return df


def _latents_from(df: pd.DataFrame, path: str) -> list[LatentParams]:
    out = []
    rows = zip(df["a_x"], df["lambda"], df["stretch"])
    for row_no, (a_x, lam, stretch) in enumerate(rows, start=2):
        try:
            out.append(LatentParams(a_x=float(a_x), lam=float(lam), stretch=float(stretch)))
        except (ValueError, ValidationError) as e:
            raise DataError(f"{path}: line {row_no}: {e}") from e
    return out


def cmd_classify(cfg: RunConfig) -> int:
    df = read_latents(cfg.latents)
    latents = _latents_from(df, cfg.latents)
    predicted = [classify(lp, cfg.thresholds) for lp in latents]
    out = Path(cfg.output_dir)
    result = pd.DataFrame({"scenario_id": df["scenario_id"], "predicted": [p.value for p in predicted]})
    if "label" in df.columns:
        result.insert(1, "label", df["label"])
    result.to_csv(out / "classified.csv", index=False)

    known = {c.value for c in ManeuverClass}
    if "label" in df.columns and len(df) and set(df["label"]) <= known:
        matrix = confusion([ManeuverClass(v) for v in df["label"]], predicted)
        write_confusion_csv(matrix, out / "confusion.csv")
        logger.info("Classifier macro accuracy: %.3f over %d rows", matrix.accuracy, len(df))
    return 0


def cmd_validate(cfg: RunConfig) -> int:
    df = read_latents(cfg.latents)
    verdicts = [validate(lp, cfg.rules) for lp in _latents_from(df, cfg.latents)]
    pd.DataFrame(
        {
            "scenario_id": df["scenario_id"],
            "accepted": [v.accepted for v in verdicts],
            "violations": [";".join(v.violations) for v in verdicts],
        }
    ).to_csv(Path(cfg.output_dir) / "verdicts.csv", index=False)
    logger.info("Watchdog rejected %d of %d rows", sum(not v.accepted for v in verdicts), len(verdicts))
    return 0


def cmd_gradcheck(cfg: RunConfig) -> int:
    kind = cfg.model
    if kind is None or not kind.trainable:
        raise UsageError("gradcheck needs a trainable --model")
    if cfg.data.path or cfg.data.kind == "synthetic":
        scenarios = load_data(cfg).scenarios[: cfg.gradcheck_samples]
    else:
        scenarios = generate_synthetic(cfg.gradcheck_samples, seed=cfg.seed, grid=cfg.grid).scenarios
    batch = stack_scenarios(scenarios)
    store = build_store(kind, cfg.grid, cfg.encoder, cfg.decoder, seed=cfg.seed)
    eps = np.random.default_rng(cfg.seed).standard_normal((len(batch), 3)) if kind.samples_latent else None
    kl_weight = cfg.train.kl_weight if kind.samples_latent else 0.0

    def loss_fn(params, tape: GradientTape):
        pred, mean, log_var = forward(tape, kind, params, batch, cfg.grid, eps, cfg.decoder)
        loss, _ = objective_op(tape, pred, batch.target_future, mean, log_var if kind.samples_latent else None, kl_weight)
        return loss

    report = grad_check(loss_fn, store, tolerance=cfg.gradcheck_tolerance, step=1e-5, max_checks_per_block=20, seed=cfg.seed)
    pd.DataFrame({"parameter": list(report.blocks), "worst_relative_error": list(report.blocks.values())}).to_csv(
        Path(cfg.output_dir) / "gradcheck.csv", index=False
    )
    if not report.passed:
        logger.error("Gradient check failed: worst relative error %.3e > %.1e", report.worst, report.tolerance)
        return NumericError.exit_code
    logger.info("Gradient check passed: worst relative error %.3e", report.worst)
    return 0


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "fit": cmd_fit,
    "classify": cmd_classify,
    "validate": cmd_validate,
    "gradcheck": cmd_gradcheck,
}


# --- Argument parsing ---

def _model_kind(value: str) -> ModelKind:
    try:
        return ModelKind(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"unknown model {value!r}") from None


def _model_list(value: str) -> list[ModelKind]:
    return [_model_kind(v) for v in value.split(",") if v.strip()]


def _mix(value: str) -> tuple[float, float, float]:
    try:
        parts = tuple(float(Fraction(v.strip())) for v in value.split(","))
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"bad class mix {value!r}") from None
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("class mix needs three fractions (LL, KL, LR)")
    return parts


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="JSON", help="run_config.json from an earlier run; replaces all other flags")
    p.add_argument("--output-dir", default="output")
    p.add_argument("--seed", type=int)
    p.add_argument("--dt", type=float)
    p.add_argument("--t-obs", type=float)
    p.add_argument("--t-pred", type=float)


def _add_data(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="canonical scenario file, or tracks CSV with --column-map")
    p.add_argument("--column-map", help="key=value file mapping track fields to CSV columns")
    p.add_argument("--stride", type=int)
    p.add_argument("--train-fraction", type=float)


def _add_model_shape(p: argparse.ArgumentParser) -> None:
    p.add_argument("--separate-neighbor-lstm", action="store_true", help="one LSTM per neighbor slot")
    p.add_argument("--unroll", choices=["single", "repeat"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Descriptive VAE trajectory prediction")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic scenario file")
    _add_common(p)
    p.add_argument("--count", type=int)
    p.add_argument("--mix", type=_mix, help="LL,KL,LR fractions, e.g. 1/3,1/3,1/3")
    p.add_argument("--noise", type=float)
    p.add_argument("--neighbor-presence", type=float)

    p = sub.add_parser("train", help="train DVAE, VAE or DeAE")
    _add_common(p)
    _add_data(p)
    _add_model_shape(p)
    p.add_argument("--model", type=_model_kind)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--kl-weight", type=float)
    p.add_argument("--grad-clip", type=float, help="elementwise clip; 0 disables")

    p = sub.add_parser("eval", help="evaluate models on the test split")
    _add_common(p)
    _add_data(p)
    _add_model_shape(p)
    p.add_argument("--models", type=_model_list)
    p.add_argument("--checkpoint", action="append", default=[], metavar="KIND=PATH")
    p.add_argument("--error-mode", choices=["final", "mean", "max"])
    p.add_argument("--longitudinal", action="store_true")
    p.add_argument("--thresholds")
    p.add_argument("--rules")

    p = sub.add_parser("predict", help="write predicted trajectories and latents")
    _add_common(p)
    _add_data(p)
    _add_model_shape(p)
    p.add_argument("--model", type=_model_kind)
    p.add_argument("--checkpoint", action="append", default=[], metavar="PATH")
    p.add_argument("--mode", choices=["eval", "sample"])

    p = sub.add_parser("fit", help="curve-fit reference latents and histograms")
    _add_common(p)
    _add_data(p)
    p.add_argument("--bins", type=int)
    p.add_argument("--label-filter", choices=[c.value for c in ManeuverClass])

    p = sub.add_parser("classify", help="classify maneuvers from a latents CSV")
    _add_common(p)
    p.add_argument("--latents")
    p.add_argument("--thresholds")

    p = sub.add_parser("validate", help="run the watchdog over a latents CSV")
    _add_common(p)
    p.add_argument("--latents")
    p.add_argument("--rules")

    p = sub.add_parser("gradcheck", help="finite-difference check of a model's gradients")
    _add_common(p)
    _add_data(p)
    _add_model_shape(p)
    p.add_argument("--model", type=_model_kind)
    p.add_argument("--samples", type=int)
    p.add_argument("--tolerance", type=float)
    return parser


def _given(args: argparse.Namespace, **names: str) -> dict:
    """Map flag attributes that were actually set onto config field names."""
    return {field: getattr(args, attr) for field, attr in names.items() if getattr(args, attr, None) is not None}


def _checkpoints(args: argparse.Namespace) -> dict[str, str]:
    out = {}
    for entry in getattr(args, "checkpoint", []):
        if "=" in entry:
            key, path = entry.split("=", 1)
            try:
                kind = ModelKind(key)
            except ValueError:
                raise ConfigurationError(f"unknown model in checkpoint {entry!r}") from None
        elif getattr(args, "model", None) is not None:
            kind, path = args.model, entry
        else:
            raise ConfigurationError(f"checkpoint {entry!r} needs a KIND= prefix")
        out[kind.value] = path
    return out


def build_run_config(args: argparse.Namespace) -> RunConfig:
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigurationError(f"config file not found: {path}")
        cfg = RunConfig.model_validate_json(path.read_text(encoding="utf-8"))
        if cfg.command != args.command:
            raise ConfigurationError(f"{path} is a {cfg.command!r} config, not {args.command!r}")
        return cfg

    seed = args.seed if args.seed is not None else 0
    grid = TimeGrid(**_given(args, dt="dt", t_obs="t_obs", t_pred="t_pred"))
    fields: dict = {"command": args.command, "grid": grid, "seed": seed, "output_dir": args.output_dir}

    if args.command == "gen":
        if args.count is None:
            raise ConfigurationError("--count is required")
        generator = GeneratorConfig(
            count=args.count,
            seed=seed,
            **_given(args, class_mix="mix", noise_sigma="noise", neighbor_presence="neighbor_presence"),
        )
        fields["data"] = DataSource(kind="synthetic", generator=generator)
    elif getattr(args, "data", None) is not None:
        kind = "adapter" if args.column_map else "canonical"
        fields["data"] = DataSource(kind=kind, path=args.data, column_map=args.column_map, stride=args.stride)

    if getattr(args, "model", None) is not None:
        fields["model"] = args.model
    if getattr(args, "models", None):
        fields["models"] = args.models
    fields.update(_given(args, train_fraction="train_fraction", error_mode="error_mode", mode="mode",
                         latents="latents", bins="bins", label_filter="label_filter",
                         gradcheck_samples="samples", gradcheck_tolerance="tolerance"))
    if getattr(args, "longitudinal", False):
        fields["longitudinal"] = True
    if getattr(args, "checkpoint", None):
        fields["checkpoints"] = _checkpoints(args)

    train_fields = _given(args, lr="lr", epochs="epochs", batch_size="batch_size", kl_weight="kl_weight")
    if getattr(args, "grad_clip", None) is not None:
        train_fields["grad_clip"] = args.grad_clip or None
    fields["train"] = TrainConfig(seed=seed, **train_fields)
    if getattr(args, "separate_neighbor_lstm", False):
        fields["encoder"] = EncoderConfig(share_neighbor_lstm=False)
    if getattr(args, "unroll", None):
        fields["decoder"] = LearnedDecoderConfig(unroll=args.unroll)
    if getattr(args, "thresholds", None):
        fields["thresholds"] = config.load_thresholds(args.thresholds)
    if getattr(args, "rules", None):
        fields["rules"] = config.load_rules(args.rules)
    return RunConfig(**fields)


def _attach_run_log(out_dir: Path) -> logging.Handler:
    handler = logging.FileHandler(out_dir / "run.log", mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger().addHandler(handler)
    return handler


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command in ("gen", "train") and args.seed is None and not args.config:
        parser.error(f"--seed is required for {args.command}")

    try:
        logging.basicConfig(level=config.get_settings().log_level)
        cfg = build_run_config(args)
    except ValidationError as e:
        logger.error("Invalid arguments: %s", e)
        return 2
    except DvaeError as e:
        logger.error("%s", e)
        return e.exit_code

    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.json").write_text(cfg.model_dump_json(indent=2), encoding="utf-8")
    handler = _attach_run_log(out)
    try:
        return COMMANDS[cfg.command](cfg)
    except ValidationError as e:
        logger.error("%s: invalid input: %s", cfg.command, e)
        return 2
    except DvaeError as e:
        logger.error("%s failed: %s", cfg.command, e)
        return e.exit_code
    finally:
        logging.getLogger().removeHandler(handler)
        handler.close()


if __name__ == "__main__":
    sys.exit(main())
