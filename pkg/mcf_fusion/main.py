"""Command-line entry point: `mcf <command> [flags]`."""

import argparse
import sys
from pathlib import Path
from typing import Optional

from mcf_fusion import __version__
from mcf_fusion.api import commands
from mcf_fusion.api.dto import SynthMode
from mcf_fusion.core.config import get_settings
from mcf_fusion.core.logging import setup_logging
from mcf_fusion.services.evaluate import EVAL_BATCH_SIZE


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="Run configuration file (key = value)")
    parser.add_argument("--preset", help="Named preset from config/presets.yaml")
    parser.add_argument("--seed", type=int, help="Overrides the configured seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mcf", description="Multimodal context fusion for context-aware emotion recognition"
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", help="Overrides MCF_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-synth", help="Generate a synthetic feature bundle")
    gen.add_argument("--mode", choices=[m.value for m in SynthMode], default=SynthMode.XOR.value)
    gen.add_argument("--n", type=int, default=256, help="Number of samples")
    gen.add_argument("--seed", type=int, default=get_settings().DEFAULT_SEED)
    gen.add_argument("--noise-sigma", type=float, default=1.0)
    gen.add_argument("--signal-strength", type=float, default=2.0)
    gen.add_argument("--n-disc", type=int, help="Discrete classes (linear mode)")
    gen.add_argument("--label-noise", type=float, default=0.0)
    gen.add_argument("--geometry", choices=["full", "toy"], default="full")
    for field in ("t_pe", "d_pe", "t_fg", "d_fg", "t_vs", "d_vs"):
        gen.add_argument(f"--{field.replace('_', '-')}", dest=field, type=int)
    gen.add_argument("--out", type=Path, required=True)
    gen.add_argument("--no-timestamp", action="store_true", help="Omit the created line")
    gen.set_defaults(handler=commands.cmd_gen_synth)

    train = sub.add_parser("train", help="Train a model from a run configuration")
    _add_config_flags(train)
    train.add_argument("--out", type=Path, help="Checkpoint directory (overrides `checkpoint`)")
    train.add_argument("--history", type=Path, help="History file (overrides `history`)")
    train.add_argument("--no-timestamp", action="store_true", help="Omit created lines")
    train.set_defaults(handler=commands.cmd_train)

    ev = sub.add_parser("eval", help="Evaluate a checkpoint on a bundle")
    ev.add_argument("--checkpoint", type=Path, required=True)
    ev.add_argument("--bundle", type=Path, required=True)
    ev.add_argument("--out", type=Path, help="Write the report as JSON")
    ev.add_argument("--batch-size", type=int, default=EVAL_BATCH_SIZE)
    ev.set_defaults(handler=commands.cmd_eval)

    pred = sub.add_parser("predict", help="Write per-sample predictions as JSON lines")
    pred.add_argument("--checkpoint", type=Path, required=True)
    pred.add_argument("--bundle", type=Path, required=True)
    pred.add_argument("--out", type=Path, required=True)
    pred.add_argument("--batch-size", type=int, default=EVAL_BATCH_SIZE)
    pred.set_defaults(handler=commands.cmd_predict)

    grad = sub.add_parser("gradcheck", help="Run the gradient suites at toy geometry")
    grad.add_argument("--seed", type=int, default=get_settings().DEFAULT_SEED)
    grad.add_argument("--max-elements", type=int, help="Entries sampled per tensor")
    grad.add_argument("--break-gradient", action="store_true", help="Corrupt analytic gradients")
    grad.set_defaults(handler=commands.cmd_gradcheck)

    seeds = sub.add_parser("seeds", help="Train and evaluate over consecutive seeds")
    _add_config_flags(seeds)
    seeds.add_argument("--seeds", type=int, default=5, help="Number of seeds")
    seeds.add_argument("--out", type=Path, help="Write the summary as JSON")
    seeds.set_defaults(handler=commands.cmd_seeds)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    return commands.run_command(args.handler, args)


if __name__ == "__main__":
    sys.exit(main())
