"""Command-line front end.

Exit codes: 0 success, 1 invalid input, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import sys

from .harness import SUBCOMMANDS, run_scenario
from .scenario import ScenarioError, default_scenario, load_scenario, validate_scenario


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="numtrack",
        description="Fading-channel network utility maximization tracking simulator")
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--scenario", help="scenario YAML (default: built-in)")
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("--seeds", help="comma-separated seed override")
    parser.add_argument("--jobs", type=int, default=1, help="worker processes")
    parser.add_argument("--horizon", type=int, help="horizon override (slots)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.subcommand == "validate":
            if args.scenario is None:
                scenario = default_scenario()
                diagnostics = {"config_hash": scenario.hash, "source": "built-in"}
            else:
                scenario, diagnostics = validate_scenario(args.scenario)
            for key, value in sorted(diagnostics.items()):
                print(f"{key}: {value}")
            print("scenario ok")
            return 0
        scenario = (default_scenario() if args.scenario is None
                    else load_scenario(args.scenario))
    except (ScenarioError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        seeds = ([int(s) for s in args.seeds.split(",")] if args.seeds else None)
        written = run_scenario(scenario, args.subcommand, args.out,
                               seeds=seeds, jobs=args.jobs, horizon=args.horizon)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except RuntimeError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    for path in written:
        print(path)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
