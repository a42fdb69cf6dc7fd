"""Command-line entry point. Subcommands mirror the pipeline stages:

    polyseg generate|detect|masks|train|evaluate|visualize|pipeline
        [--config FILE] [--root PATH] [--seed N]

Exit codes: 0 success, 1 configuration error, 2 stage failure.
"""
from __future__ import annotations

import argparse
import logging
import sys

from .config import CliConfig, ConfigError, load_config
from .pipeline import STAGES, StageError, run_pipeline, run_stage


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="polyseg",
                                     description="desk-scale polyp segmentation pipeline")
    parser.add_argument("command", choices=STAGES + ["pipeline"])
    parser.add_argument("--config", help="YAML configuration file")
    parser.add_argument("--root", help="override the dataset root")
    parser.add_argument("--seed", type=int, help="override the master seed")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if args.config else CliConfig()
        if args.root is not None:
            cfg.root = args.root
        if args.seed is not None:
            cfg.seed = args.seed
            cfg.dataset.seed = args.seed
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1

    if args.command == "pipeline":
        return run_pipeline(cfg)
    try:
        run_stage(args.command, cfg)
    except StageError as exc:
        print(exc, file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
