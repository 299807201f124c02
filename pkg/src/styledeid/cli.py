"""Command line entry point: ``styledeid {world,deid,attack,utility,report}``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

from . import pipeline
from .config import ConfigError, RunConfig, load_config, validate

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

STAGES = {
    "world": pipeline.run_world,
    "deid": pipeline.run_deid,
    "attack": pipeline.run_attack,
    "utility": pipeline.run_utility,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="styledeid", description="Style-mixing de-identification laboratory.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML run configuration (defaults when omitted)")
    common.add_argument("--seed", type=int, help="override the global seed")
    common.add_argument("--workers", type=int, help="worker processes for inversion and attacks")
    common.add_argument("--out", metavar="DIR", help="run directory")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("world", parents=[common], help="build the synthetic population")
    sub.add_parser("deid", parents=[common], help="invert and style-mix every photo")
    a = sub.add_parser("attack", parents=[common], help="verification and identification attacks")
    a.add_argument("--threat-models", metavar="NAMES", help="comma separated subset of m1..m7")
    sub.add_parser("utility", parents=[common], help="attribute preservation sweep")
    sub.add_parser("report", parents=[common], help="evaluate trend properties, print PASS/FAIL")
    sub.add_parser("all", parents=[common], help="run every stage in order")
    return p


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.workers is not None:
        changes["workers"] = args.workers
    if args.out is not None:
        changes["out"] = args.out
    if getattr(args, "threat_models", None):
        names = tuple(n.strip() for n in args.threat_models.split(",") if n.strip())
        changes["attack"] = dataclasses.replace(cfg.attack, threat_models=names)
    cfg = dataclasses.replace(cfg, **changes)
    validate(cfg)
    return cfg


def print_report(checks: list[dict]) -> None:
    for c in checks:
        print(f"{c['status']:<8} {c['property']}: {c['detail']}")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"run {cfg.run_id} -> {cfg.out}")
    try:
        if args.command == "report":
            checks, _ = pipeline.run_report(cfg)
            print_report(checks)
        elif args.command == "all":
            for stage in STAGES.values():
                stage(cfg)
            checks, _ = pipeline.run_report(cfg)
            print_report(checks)
        else:
            STAGES[args.command](cfg)
    except pipeline.DependencyError as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - the CLI reports any failure as a runtime error
        logging.getLogger("styledeid").exception("%s failed", args.command)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
