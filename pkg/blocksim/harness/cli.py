"""
Command-line entry point

    blocksim run --config experiment.json [--out DIR] [--seed N] [--policy NAME] [--qps X]
    blocksim sweep --config experiment.json
    blocksim capacity --config experiment.json
    blocksim serve {backend,predictor,scheduler} --config experiment.json
    blocksim convert-trace {sharegpt,burstgpt} INPUT OUTPUT

Exit codes: 0 success, 2 config or input error, 3 simulation failure.
"""
import argparse
import json
import logging
import os
import sys
from typing import List, Optional, Sequence

import pandas as pd

from blocksim.errors import BlockSimError, InvalidConfig, InvalidRecord, ParseError
from blocksim.harness.config import ExperimentConfig, apply_overrides, load_config
from blocksim.harness.runner import capacity, run, sweep
from blocksim.harness.service import Role, serve
from blocksim.scheduler import PolicyKind
from blocksim.workload import TraceRecord, convert_burstgpt, convert_sharegpt, write_trace

logger = logging.getLogger("blocksim")

LOG_LEVEL_ENV = "BLOCK_LOG_LEVEL"
EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_FAILURE = 3


def configure_logging() -> None:
    level = os.environ.get(LOG_LEVEL_ENV, "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="blocksim", description="LLM serving simulator")
    commands = parser.add_subparsers(dest="command", required=True)

    for name, help_ in (
        ("run", "simulate one experiment"),
        ("sweep", "simulate every (policy, qps, seed) cell"),
        ("capacity", "search the highest qps meeting the ttft slo"),
    ):
        command = commands.add_parser(name, help=help_)
        _add_experiment_flags(command)

    serve_ = commands.add_parser("serve", help="run one service role")
    serve_.add_argument("role", choices=[role.value for role in Role])
    _add_experiment_flags(serve_)

    convert = commands.add_parser("convert-trace", help="convert a public trace dump")
    convert.add_argument("format", choices=["sharegpt", "burstgpt"])
    convert.add_argument("input", help="ShareGPT json dump or BurstGPT csv")
    convert.add_argument("output", help="line-delimited trace to write")
    return parser


def _add_experiment_flags(command: argparse.ArgumentParser) -> None:
    command.add_argument("--config", required=True, help="experiment json file")
    command.add_argument("--out", help="output directory")
    command.add_argument("--seed", type=int, help="workload seed")
    command.add_argument(
        "--policy", choices=[kind.value for kind in PolicyKind], help="dispatch policy"
    )
    command.add_argument("--qps", type=float, help="arrival rate")


def load_experiment(args: argparse.Namespace) -> ExperimentConfig:
    config = load_config(args.config)
    return apply_overrides(config, seed=args.seed, policy=args.policy, qps=args.qps, out=args.out)


def convert_trace(fmt: str, source: str, destination: str) -> List[TraceRecord]:
    """:raise ParseError if {source} cannot be read"""
    try:
        if fmt == "sharegpt":
            with open(source, encoding="utf-8") as f:
                records = convert_sharegpt(json.load(f))
        else:
            records = convert_burstgpt(pd.read_csv(source))
    except (OSError, ValueError) as exc:
        raise ParseError(0, f"{source}: {exc}") from exc
    write_trace(records, destination)
    return records


def execute(args: argparse.Namespace) -> None:
    if args.command == "convert-trace":
        records = convert_trace(args.format, args.input, args.output)
        print(f"{len(records)} records written to {args.output}")
        return

    config = load_experiment(args)
    if args.command == "run":
        for path in run(config):
            print(path)
    elif args.command == "sweep":
        frame = sweep(config)
        print(frame.to_string(index=False))
    elif args.command == "capacity":
        frame = capacity(config)
        print(frame.to_string(index=False))
    elif args.command == "serve":
        serve(Role(args.role), config)


def main(argv: Optional[Sequence[str]] = None) -> int:
    configure_logging()
    args = build_parser().parse_args(argv)
    try:
        execute(args)
    except (InvalidConfig, ParseError, InvalidRecord) as exc:
        logger.error("%s", exc)
        return EXIT_CONFIG
    except BlockSimError as exc:
        logger.error("%s", exc)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
