"""
CLI entry point for siamsearch.

Usage:
    uv run python -m siamsearch search --config siamsearch.toml --out runs/s
    uv run python -m siamsearch pretrain --genotype runs/s/genotype.json --out runs/s
    uv run python -m siamsearch pretrain --genotype reference --out runs/baseline
    uv run python -m siamsearch linear-probe --checkpoint runs/s/checkpoint.ckpt --out runs/s
    uv run python -m siamsearch ablate --out runs/ablation
    uv run python -m siamsearch report runs/*/metrics.csv --out runs/report
"""

import argparse
import logging
import sys
from collections.abc import Sequence

from .config import load_config, with_overrides
from .errors import SiamSearchError
from .pipeline import cmd_ablate, cmd_linear_probe, cmd_pretrain, cmd_report, cmd_search
from .utils import format_percent

logger = logging.getLogger("siamsearch")


def setup_logging(verbose: bool = False) -> None:
    """Configure logging for siamsearch."""
    level = logging.DEBUG if verbose else logging.INFO
    logging.basicConfig(
        level=level,
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
        datefmt="%H:%M:%S",
    )


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config (default: siamsearch.toml in this or a parent directory)")
    common.add_argument("--out", help="output directory (overrides run.out)")
    common.add_argument("--seed", type=int, help="run seed (overrides run.seed)")
    common.add_argument("--verbose", "-v", action="store_true", help="print per-batch debug output")

    parser = argparse.ArgumentParser(
        prog="siamsearch",
        description="Differentiable search of projector and predictor heads for siamese self-supervised learning",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    sub.add_parser("search", parents=[common], help="bi-level search; writes genotype.json and the search log")

    p = sub.add_parser("pretrain", parents=[common], help="pretrain backbone and heads of a fixed genotype")
    p.add_argument("--genotype", required=True, help='genotype JSON, or "reference" for the hand-designed heads')
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("linear-probe", parents=[common], help="linear classifier on frozen backbone features")
    p.add_argument("--checkpoint", help="pretrained checkpoint (default: random frozen backbone)")

    sub.add_parser("ablate", parents=[common], help="search space and augmentation ablations")

    p = sub.add_parser("report", parents=[common], help="summary CSV and SVG plots from metrics files")
    p.add_argument("metrics", nargs="+", help="metrics.csv files")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    """Main entry point."""
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose)

    try:
        if args.command == "report":
            paths = cmd_report(args.metrics, args.out or "report")
            print(f"summary: {paths.summary}")
            return 0

        config = with_overrides(load_config(args.config), seed=args.seed, out=args.out)
        if args.command == "search":
            outcome = cmd_search(config)
            print(f"genotype: {outcome.genotype_path}")
        elif args.command == "pretrain":
            result = cmd_pretrain(config, args.genotype, resume=args.resume)
            print(f"final loss: {result.losses[-1]:.4f}" if result.losses else "nothing to train")
        elif args.command == "linear-probe":
            result = cmd_linear_probe(config, args.checkpoint)
            print(f"top1: {format_percent(result.top1)}  top5: {format_percent(result.top5)}")
        elif args.command == "ablate":
            path, _ = cmd_ablate(config)
            print(f"ablation: {path}")
    except (SiamSearchError, OSError) as e:
        logger.error("%s failed: %s", args.command, e)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
