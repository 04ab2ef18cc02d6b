"""Command-line entry point: ``jflow run | validate | compare``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .errors import ConfigError, JFlowError, StageError
from .fieldio import FieldFormatError, read_field
from .scenario import compare_limits, parse_scenario, run_scenario


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jflow", description="J-flow and Monge-Ampere experiments on the flat torus")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario file")
    run.add_argument("scenario", help="path to a YAML scenario")
    run.add_argument("--out", metavar="DIR", help="output directory (overrides output.directory)")
    run.add_argument("--strict", action="store_true", help="treat unknown keys as errors")
    run.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                     help="dotted key override, value parsed as YAML (repeatable)")

    val = sub.add_parser("validate", help="parse and validate a scenario without running it")
    val.add_argument("scenario")
    val.add_argument("--strict", action="store_true")
    val.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")

    cmp = sub.add_parser("compare", help="compare two field dumps up to an additive constant")
    cmp.add_argument("first")
    cmp.add_argument("second")
    cmp.add_argument("--tolerance", type=float, default=1e-6)
    return parser


def _report_config_error(exc: ConfigError) -> int:
    print("invalid scenario:", file=sys.stderr)
    for v in exc.violations:
        print(f"  - {v}", file=sys.stderr)
    return 2


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    if args.command in ("run", "validate"):
        try:
            config = parse_scenario(args.scenario, strict=args.strict, overrides=args.override)
        except ConfigError as exc:
            return _report_config_error(exc)
        for w in config.warnings:
            print(f"warning: {w}", file=sys.stderr)
        if args.command == "validate":
            print(f"{config.name}: valid ({config.scenario_hash[:12]})")
            return 0
        try:
            summary = run_scenario(config, args.out)
        except ConfigError as exc:
            return _report_config_error(exc)
        except StageError as exc:
            print(f"stage {exc.stage} failed: {exc.cause}", file=sys.stderr)
            return 3
        print(json.dumps(summary.as_json(), indent=2, sort_keys=True))
        return summary.exit_code

    try:
        a, b = read_field(args.first), read_field(args.second)
        result = compare_limits(a, b, tolerance=args.tolerance)
    except (OSError, FieldFormatError, JFlowError) as exc:
        print(f"compare failed: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(result.as_dict(), indent=2))
    return 0 if result.passed else 1


if __name__ == "__main__":
    sys.exit(main())
