"""Command-line entry point.

    fscgrad <exact|estimate|compare|train|posmdp|locate> [--config FILE] [--model FILE] [--seed N] [--out DIR]

Exit codes: 0 success, 2 configuration error, 3 model or assumption error.
"""
import argparse
import logging
import sys

from fscgrad.config import load_config, runtime_settings
from fscgrad.errors import AssumptionViolation, ConfigError, DimensionMismatchError, FeatureError, ModelFormatError
from fscgrad.runner import RUNS

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MODEL = 3

COMMANDS = {
    "exact": "Dump the exact oracle (pi, eta, h, Q, v1, v2, gradients)",
    "estimate": "Per-seed gradient estimates",
    "compare": "Alignment table of B-TD, OL-TD and GPOMDP against the exact gradient",
    "train": "Projected-gradient training with a fresh trajectory per iteration",
    "posmdp": "Semi-Markov exact gradient and estimates",
    "locate": "Exact projected descent to a near-local-minimum checkpoint",
}


def build_parser():
    parser = argparse.ArgumentParser(prog="fscgrad", description="Policy gradients for finite-state controllers on POMDPs")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in COMMANDS.items():
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", help="YAML experiment config")
        cmd.add_argument("--model", help="Model file (.pomdp or .json); overrides model.path")
        cmd.add_argument("--seed", type=int, help="Base seed; overrides run.seed")
        cmd.add_argument("--out", help="Output directory; overrides run.out_dir")
        cmd.add_argument("--checkpoint", help="Policy checkpoint; overrides policy.checkpoint")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        settings = runtime_settings()
    except ConfigError as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(
        level=getattr(logging, settings.log_level, logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )
    overrides = {
        "model.path": args.model,
        "run.seed": args.seed,
        "run.out_dir": args.out,
        "policy.checkpoint": args.checkpoint,
        "run.mode": args.command,
    }
    try:
        cfg = load_config(args.config, overrides)
        logger.info(f"Running {args.command} on {cfg.model.path} (seed {cfg.run.seed})")
        outputs = RUNS[args.command](cfg, settings)
    except ConfigError as e:
        logger.error(f"❌ Configuration error: {e}")
        return EXIT_CONFIG
    except (ModelFormatError, AssumptionViolation, DimensionMismatchError, FeatureError) as e:
        logger.error(f"❌ {type(e).__name__}: {e}")
        return EXIT_MODEL
    for name, value in outputs.items():
        logger.info(f"✅ {name}: {value}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
