"""Command handlers for the `mcf` CLI."""

import argparse
import json
import time
from collections.abc import Callable
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Optional

import numpy as np
import structlog
from pydantic import ValidationError

from mcf_fusion.api.dto import Geometry, RunConfig, SyntheticSpec
from mcf_fusion.core.config import get_preset, read_key_value_file
from mcf_fusion.core.errors import (
    CheckFailure,
    CheckpointError,
    ConfigurationError,
    DataError,
    McfError,
)
from mcf_fusion.core.logging import loggable
from mcf_fusion.services.bundle import (
    FeatureBundle,
    atomic_write,
    manifest_path,
    read_bundle,
    split_dataset,
    write_bundle,
    write_manifest,
)
from mcf_fusion.services.checkpoint import load_checkpoint, save_checkpoint
from mcf_fusion.services.diagnostics import run_gradient_suites
from mcf_fusion.services.evaluate import evaluate, format_report, predict
from mcf_fusion.services.model import McfModel
from mcf_fusion.services.synthetic import gen_synthetic
from mcf_fusion.services.train import fit, history_lines

logger = structlog.get_logger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_CHECK = 4

# Multiplier applied to analytic gradients by --break-gradient.
BROKEN_GRADIENT_FACTOR = 1.01

Handler = Callable[[argparse.Namespace], None]


def exit_code_for(exc: Exception) -> int:
    if isinstance(exc, CheckFailure):
        return EXIT_CHECK
    if isinstance(exc, (DataError, CheckpointError, OSError)):
        return EXIT_DATA
    return EXIT_CONFIG


def run_command(handler: Handler, args: argparse.Namespace) -> int:
    """Run one handler, mapping failures to exit codes."""
    start_time = time.time()
    structlog.contextvars.bind_contextvars(command=args.command)
    try:
        handler(args)
        logger.info("Command completed", total_time_ms=round((time.time() - start_time) * 1000, 2))
        return EXIT_OK
    except McfError as exc:
        logger.error(
            "Command failed",
            error_type=type(exc).__name__,
            error_message=exc.message,
            error_details=loggable(exc.details),
        )
        return exit_code_for(exc)
    except OSError as exc:
        logger.error("I/O error", error_type=type(exc).__name__, error_message=str(exc))
        return EXIT_DATA
    finally:
        structlog.contextvars.unbind_contextvars("command", "seed")


def _created(args: argparse.Namespace) -> Optional[datetime]:
    return None if getattr(args, "no_timestamp", False) else datetime.now(timezone.utc)


def _validation_messages(error: ValidationError) -> list[str]:
    return [
        f"{'.'.join(str(part) for part in err['loc']) or '<root>'}: {err['msg']}"
        for err in error.errors()
    ]


def resolve_run_config(
    config_path: Optional[Path], preset: Optional[str], seed: Optional[int]
) -> RunConfig:
    """Preset keys, then config-file keys, then command-line flags."""
    file_entries: dict[str, Any] = dict(read_key_value_file(config_path)) if config_path else {}
    preset_name = preset or file_entries.get("preset") or None

    merged: dict[str, Any] = get_preset(preset_name) if preset_name else {}
    merged.update(file_entries)
    if preset_name:
        merged["preset"] = preset_name
    if seed is not None:
        merged["seed"] = seed

    try:
        run = RunConfig(**merged)
    except ValidationError as e:
        raise ConfigurationError(
            "Invalid run configuration",
            {"path": str(config_path) if config_path else None, "errors": _validation_messages(e)},
        ) from e

    for key in ("train_bundle", "val_bundle"):
        path = getattr(run, key)
        if path is not None and not Path(path).exists():
            raise ConfigurationError(f"{key} does not exist: {path}", {"key": key, "path": str(path)})
    return run


def _load_splits(run: RunConfig) -> tuple[FeatureBundle, Optional[FeatureBundle]]:
    if run.train_bundle is None:
        raise ConfigurationError("run configuration needs `train_bundle`")
    train_set = read_bundle(run.train_bundle)
    if run.val_bundle is not None:
        return train_set, read_bundle(run.val_bundle)
    if run.val_fraction > 0:
        train_set, val_set, _ = split_dataset(
            train_set, (1.0 - run.val_fraction, run.val_fraction), run.seed
        )
        return train_set, val_set
    return train_set, None


def cmd_gen_synth(args: argparse.Namespace) -> None:
    geometry = Geometry.toy() if args.geometry == "toy" else Geometry.full()
    overrides = {
        field: getattr(args, field)
        for field in ("t_pe", "d_pe", "t_fg", "d_fg", "t_vs", "d_vs")
        if getattr(args, field) is not None
    }
    try:
        if overrides:
            geometry = Geometry(**{**geometry.model_dump(), **overrides})
        spec = SyntheticSpec(
            mode=args.mode,
            n_samples=args.n,
            noise_sigma=args.noise_sigma,
            signal_strength=args.signal_strength,
            seed=args.seed,
            geometry=geometry,
            n_disc=args.n_disc,
            label_noise=args.label_noise,
        )
    except ValidationError as e:
        raise ConfigurationError(
            "Invalid synthetic bundle settings", {"errors": _validation_messages(e)}
        ) from e
    structlog.contextvars.bind_contextvars(seed=spec.seed)

    bundle = gen_synthetic(spec)
    size = write_bundle(args.out, bundle)
    write_manifest(
        manifest_path(args.out),
        {
            "source": "synthetic",
            "mode": spec.mode.value,
            "seed": spec.seed,
            "noise_sigma": spec.noise_sigma,
            "signal_strength": spec.signal_strength,
            "label_noise": spec.label_noise,
            "avd_scale": "normalized to [0, 1]",
        },
        timestamp=_created(args) is not None,
    )

    g = spec.geometry
    print(f"wrote {args.out} ({size} bytes)")
    print(f"samples: {len(bundle)}  task: {bundle.task.value}  n_disc: {bundle.n_disc}  seed: {spec.seed}")
    print(
        f"geometry: T_PE={g.t_pe} d_PE={g.d_pe} T_FG={g.t_fg} d_FG={g.d_fg} "
        f"T_VS={g.t_vs} d_VS={g.d_vs}"
    )


def cmd_train(args: argparse.Namespace) -> None:
    run = resolve_run_config(args.config, args.preset, args.seed)
    structlog.contextvars.bind_contextvars(seed=run.seed)
    checkpoint = Path(args.out) if args.out else run.checkpoint
    if checkpoint is None:
        raise ConfigurationError("no checkpoint path: set `checkpoint` or pass --out")
    history_path = Path(args.history) if args.history else (run.history or checkpoint / "history.jsonl")

    train_cfg = run.to_train_config()
    train_set, val_set = _load_splits(run)
    model = McfModel(run.to_mcf_config(), seed=run.seed)
    # Fail on geometry before any training happens.
    model.check_geometry(train_set.geometry)
    model.check_task(train_set.task, train_set.n_disc)

    history = fit(model, train_set, val_set, train_cfg)

    save_checkpoint(model, checkpoint, timestamp=_created(args) is not None)
    atomic_write(history_path, history_lines(history, created=_created(args)))
    if run.report is not None and val_set is not None and len(val_set) > 0:
        report = evaluate(model, val_set, lambda1=run.lambda1, lambda2=run.lambda2)
        atomic_write(run.report, report.model_dump_json(exclude_none=True, indent=2) + "\n")

    last = history.records[-1]
    print(f"epochs: {len(history.records)}  best_epoch: {history.best_epoch}")
    print(f"train_loss: {last.train_loss:.4f}" + (
        f"  val_loss: {last.val_loss:.4f}" if last.val_loss is not None else ""
    ))
    print(f"checkpoint: {checkpoint}")
    print(f"history: {history_path}")


def cmd_eval(args: argparse.Namespace) -> None:
    model = load_checkpoint(args.checkpoint)
    structlog.contextvars.bind_contextvars(seed=model.seed)
    bundle = read_bundle(args.bundle)
    report = evaluate(model, bundle, batch_size=args.batch_size)
    if args.out:
        atomic_write(Path(args.out), report.model_dump_json(exclude_none=True, indent=2) + "\n")
    print(format_report(report))


def cmd_predict(args: argparse.Namespace) -> None:
    model = load_checkpoint(args.checkpoint)
    bundle = read_bundle(args.bundle)
    preds = predict(model, bundle, batch_size=args.batch_size)
    lines = [json.dumps(row, sort_keys=True) for row in preds.rows(bundle.task)]
    atomic_write(Path(args.out), "\n".join(lines) + "\n")
    print(f"wrote {len(lines)} predictions to {args.out}")


def cmd_gradcheck(args: argparse.Namespace) -> None:
    structlog.contextvars.bind_contextvars(seed=args.seed)
    corrupt = BROKEN_GRADIENT_FACTOR if args.break_gradient else 1.0
    results = run_gradient_suites(seed=args.seed, corrupt=corrupt, max_elements=args.max_elements)

    failures: dict[str, list[str]] = {}
    for result in results:
        status = "ok" if result.passed else "FAIL"
        print(f"{result.name:<40} max_rel_error={result.report.max_rel_error:.3e}  {status}")
        bad = result.report.failures(result.threshold)
        if bad:
            failures[result.name] = [e.name for e in bad]
            for entry in bad:
                print(f"    {entry.name}: {entry.max_rel_error:.3e}")

    if failures:
        raise CheckFailure(
            f"{len(failures)} of {len(results)} gradient suites failed", {"failures": failures}
        )


def cmd_seeds(args: argparse.Namespace) -> None:
    """Train and evaluate over consecutive seeds; report `mean (std)` per metric."""
    base = resolve_run_config(args.config, args.preset, args.seed)
    train_set, val_set = _load_splits(base)
    if val_set is None or len(val_set) == 0:
        raise ConfigurationError("seed sweeps need validation data (val_bundle or val_fraction)")

    scores: dict[str, list[float]] = {}
    for offset in range(args.seeds):
        run = base.model_copy(update={"seed": base.seed + offset})
        structlog.contextvars.bind_contextvars(seed=run.seed)
        model = McfModel(run.to_mcf_config(), seed=run.seed)
        fit(model, train_set, val_set, run.to_train_config())
        report = evaluate(model, val_set, lambda1=run.lambda1, lambda2=run.lambda2)
        for metric, value in report.headline().items():
            scores.setdefault(metric, []).append(value)

    summary = {
        metric: {"mean": float(np.mean(values)), "std": float(np.std(values)), "values": values}
        for metric, values in scores.items()
    }
    for metric, stats in summary.items():
        print(f"{metric}: {stats['mean'] * 100:.2f} ({stats['std']:.3f})")
    if args.out:
        atomic_write(Path(args.out), json.dumps(summary, sort_keys=True, indent=2) + "\n")
