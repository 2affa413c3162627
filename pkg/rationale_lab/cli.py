"""Command-line entry point: ``rationale-lab <train|eval|oracle-check|inspect|sweep>``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections.abc import Sequence

from rationale_lab.config import RunConfig, load_config
from rationale_lab.harness import DEFAULT_SWEEP_GRID, DOMAIN_ERRORS, evaluate, execute, inspect, oracle_check, parse_grid, setup_logging, sweep


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rationale-lab", description=__doc__)
    ap.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one configuration into its run directory")
    p.add_argument("--config", default=None, help="config file (.conf line grammar or .yaml); defaults apply when omitted")
    p.add_argument("--no-progress", action="store_true")

    p = sub.add_parser("eval", help="evaluate a checkpoint on the configured eval set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", default=None)

    p = sub.add_parser("oracle-check", help="run the exact-enumeration identity battery")
    p.add_argument("--config", default=None)
    p.add_argument("--pairs", type=int, default=50)

    p = sub.add_parser("inspect", help="per-token annotations of a checkpoint's greedy rationale")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--query-seed", type=int, required=True)
    p.add_argument("--w-max", type=float, default=200.0)

    p = sub.add_parser("sweep", help="one run per grid value")
    p.add_argument("--config", default=None)
    p.add_argument("--grid", default="n=" + ",".join(str(v) for v in DEFAULT_SWEEP_GRID))
    p.add_argument("--no-progress", action="store_true")
    return ap


def _config(path: str | None) -> RunConfig:
    return load_config(path) if path else RunConfig()


def _dispatch(args: argparse.Namespace) -> int:
    if args.command == "train":
        report = execute(_config(args.config), progress=not args.no_progress)
        print(json.dumps({"initial_accuracy": report.initial_accuracy, "final_accuracy": report.final_accuracy, "skipped_steps": report.skipped_steps}))
        return 0
    if args.command == "eval":
        print(json.dumps(evaluate(args.checkpoint, _config(args.config)), sort_keys=True))
        return 0
    if args.command == "oracle-check":
        return oracle_check(_config(args.config), n_pairs=args.pairs)
    if args.command == "inspect":
        if args.query_seed < 0:
            raise SystemExit("--query-seed must be an unsigned integer")
        for row in inspect(args.checkpoint, args.query_seed, args.w_max):
            print(json.dumps(row, sort_keys=True))
        return 0
    key, values = parse_grid(args.grid)
    for row in sweep(_config(args.config), key, values, progress=not args.no_progress):
        print(json.dumps(row, sort_keys=True))
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(level=getattr(logging, args.log_level))
    try:
        return _dispatch(args)
    except (*DOMAIN_ERRORS, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
