"""Command-line entry point: ``advrm <subcommand> [--config F] [--seed N] [--out DIR] [--set k=v]``."""
from __future__ import annotations

import argparse
import logging
import sys

from ..errors import ConfigError, NumericError, StateError
from .config import OUT_ENV, load_config
from .pipeline import EVAL_PARTS, Pipeline
from .report import write_report

log = logging.getLogger("advrm")

ROUND_COMMANDS = ("train-rm", "train-policy", "attack", "filter", "build-pairs", "round")
REPRODUCE_STAGES = ("gen-world", "round", "evaluate", "report")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (defaults apply when omitted)")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", help=f"run directory (default: ${OUT_ENV}/seed<N> or ./runs/seed<N>)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. --set attack.lam=8 (repeatable)")
    common.add_argument("--stage", help="reproduce: stop after this stage; evaluate: run only this part")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="advrm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-world", parents=[common], help="build the world, SFT policy and preference data")
    for name in ROUND_COMMANDS:
        p = sub.add_parser(name, parents=[common], help=f"{name} stage for one round")
        p.add_argument("--round", "--round-index", dest="round", type=int, default=0)
    sub.add_parser("evaluate", parents=[common], help="downstream RLHF, baselines, ablations, correlation")
    sub.add_parser("report", parents=[common], help="CSV tables, plots and report.md for a run directory")
    sub.add_parser("reproduce", parents=[common], help="the whole experiment end to end")
    return parser


def _pipeline(args) -> Pipeline:
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return Pipeline(load_config(args.config, overrides), args.out)


def run(args) -> int:
    cmd = args.command
    if cmd == "report":
        if args.out:
            root = args.out
        else:
            root = load_config(args.config, list(args.set) + ([f"seed={args.seed}"] if args.seed is not None else [])).output_dir()
        print(write_report(root))
        return 0
    pipe = _pipeline(args)
    if cmd == "gen-world":
        pipe.gen_world()
    elif cmd == "train-rm":
        pipe.train_rm(args.round)
    elif cmd == "train-policy":
        pipe.train_policy(args.round)
    elif cmd == "attack":
        pipe.attack(args.round)
    elif cmd == "filter":
        pipe.filter(args.round)
    elif cmd == "build-pairs":
        pipe.build_pairs(args.round)
    elif cmd == "round":
        pipe.round(args.round)
        pipe._write_rounds_csv(pipe.executed_rounds())
    elif cmd == "evaluate":
        if args.stage and args.stage not in EVAL_PARTS:
            raise ConfigError(f"--stage for evaluate must be one of {', '.join(EVAL_PARTS)}")
        pipe.evaluate((args.stage,) if args.stage else EVAL_PARTS)
    elif cmd == "reproduce":
        if args.stage and args.stage not in REPRODUCE_STAGES:
            raise ConfigError(f"--stage for reproduce must be one of {', '.join(REPRODUCE_STAGES)}")
        pipe.reproduce(args.stage)
    print(pipe.root)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except (ConfigError, StateError, NumericError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
