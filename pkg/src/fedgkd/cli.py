"""Command-line entry point: run experiments, verify the build, summarize runs."""
from __future__ import annotations

import argparse
import json
import sys

from . import harness
from .config import ConfigError, parse_config
from .harness import ExperimentFailure


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedgkd", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment from a config file")
    run.add_argument("--config", required=True, help="path to a YAML or JSON experiment config")
    run.add_argument("--seed", type=int, default=None, help="override the config's master seed")
    run.add_argument("--diag", action="store_true", help="enable per-round drift diagnostics")
    run.add_argument("--workers", type=int, default=None, help="parallel client workers within a round")
    run.add_argument("--output-dir", default=None, help="override the config's output directory")

    ver = sub.add_parser("verify", help="run the built-in verification suites")
    ver.add_argument(
        "--suite",
        action="append",
        choices=harness.VERIFY_SUITES,
        help="suite to run (repeatable); default runs all",
    )

    summ = sub.add_parser("summarize", help="summarize one run directory or a directory of runs")
    summ.add_argument("--dir", required=True, help="run directory (or parent of run directories)")
    return parser


def cmd_run(args) -> int:
    overrides = {"seed": args.seed, "output_dir": args.output_dir, "workers": args.workers}
    if args.diag:
        overrides["diagnostics"] = True
    try:
        cfg = parse_config(args.config, overrides=overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        artifacts = harness.run_experiment(cfg)
    except ExperimentFailure as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(artifacts.summary, indent=2))
    return 0


def cmd_verify(args) -> int:
    results = harness.verify(args.suite)
    failed = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        detail = f" ({r.detail})" if r.detail else ""
        print(f"[{status}] {r.suite}: {r.name}{detail}")
        failed += not r.passed
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 1 if failed else 0


def cmd_summarize(args) -> int:
    try:
        summary = harness.summarize(args.dir)
    except FileNotFoundError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    print(json.dumps(summary, indent=2))
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {"run": cmd_run, "verify": cmd_verify, "summarize": cmd_summarize}
    return handlers[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
