# app.py

import argparse
import dataclasses
import sys
from pathlib import Path
from typing import Optional, Sequence

from loguru import logger

from agents.supervisor import cmd_sweep, export_similarity, run_experiment
from agents.verifier import verify_theorem1, verify_theorem2
from tools.config import DEFAULT_OUT_DIR, ExperimentConfig, config_from_dict, load_yaml, parse_config
from tools.errors import ConfigError
from tools.log import configure_logging

EXIT_OK = 0
EXIT_VIOLATION = 1
EXIT_CONFIG = 2


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML experiment config (defaults when omitted)")
    common.add_argument("--out", type=Path, default=Path(DEFAULT_OUT_DIR), help="output directory")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--log", help="log level (DEBUG, INFO, WARNING, ...)")

    parser = argparse.ArgumentParser(
        prog="safesparse",
        description="Sparse federated learning simulator with Byzantine-robust aggregation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("run", parents=[common], help="run one experiment")

    sweep = sub.add_parser("sweep", parents=[common], help="run a parameter grid")
    sweep.add_argument("--jobs", type=int, default=1, help="parallel cells")
    sweep.add_argument(
        "--grid", action="append", default=[], metavar="AXIS=V1,V2",
        help="sweep axis values, repeatable; replaces the config's sweep.axes",
    )

    bound = sub.add_parser("verify-bound", parents=[common], help="check the pack-level attack bound")
    bound.add_argument("--trials", type=int, default=1000)

    sub.add_parser("convergence", parents=[common], help="quadratic convergence check")

    export = sub.add_parser("export-similarity", parents=[common], help="write Jaccard and sign-cosine matrices")
    export.add_argument("--round", type=int, dest="round_idx", help="round to export (default: attack start)")
    return parser


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    config = parse_config(args.config) if args.config else config_from_dict({})
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    return config


def parse_grid(items: Sequence[str]) -> dict[str, list]:
    """`beta=0.2,0.4` -> {"beta": [0.2, 0.4]} with YAML scalar typing."""
    grid: dict[str, list] = {}
    for item in items:
        axis, sep, values = item.partition("=")
        if not sep or not values:
            raise ConfigError(f"grid entry '{item}' must look like AXIS=V1,V2", field="grid")
        grid[axis.strip()] = [load_yaml(v.strip(), source="--grid") for v in values.split(",")]
    return grid


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log)

    try:
        config = load_config(args)
        out = args.out

        if args.command == "run":
            run_experiment(config, out)
            logger.info("wrote {} and {}", out / "rounds.jsonl", out / "summary.csv")
            return EXIT_OK

        if args.command == "sweep":
            grid = parse_grid(args.grid) if args.grid else None
            cmd_sweep(config, out, grid=grid, jobs=args.jobs)
            return EXIT_OK

        if args.command == "verify-bound":
            report = verify_theorem1(args.trials, config.seed, out)
            return EXIT_OK if report.ok else EXIT_VIOLATION

        if args.command == "convergence":
            report = verify_theorem2(config, out)
            return EXIT_OK if report.ok else EXIT_VIOLATION

        if args.command == "export-similarity":
            export_similarity(config, out, args.round_idx)
            return EXIT_OK

    except ConfigError as exc:
        logger.error("config error: {}", exc)
        return EXIT_CONFIG

    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
