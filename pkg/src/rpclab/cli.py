"""Command line entry point: ``rpclab run <config.json> [--seed S] [--workers W] [--out DIR]``.

Exit codes: 0 on completion (whatever the pass/fail verdicts), 2 for an
invalid config or parameters, 3 for failures while running or writing.
"""
from __future__ import annotations

import argparse
import sys

from .runner import ConfigError, ExperimentConfig, OUT_ENV, RunFailure, emit, format_summary, load_config, resolve_output, run

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rpclab", description="Run a configured experiment and write its report.")
    sub = parser.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run the experiment described by a JSON config")
    r.add_argument("config", help="path to the JSON config")
    r.add_argument("--seed", type=int, help="override the config seed")
    r.add_argument("--workers", type=int, help="worker processes (default: available CPUs)")
    r.add_argument("--out", help=f"output directory (overrides ${OUT_ENV} and the config)")
    r.add_argument("--no-figures", action="store_true", help="skip rendering PNG figures")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_VALIDATION
    try:
        data = load_config(args.config)
        if args.seed is not None:
            data["seed"] = args.seed
        config = ExperimentConfig.from_dict(data)
        if args.workers is not None and args.workers < 1:
            raise ConfigError("--workers must be >= 1")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        report = run(config, args.workers)
        out = resolve_output(args.out, config)
        paths = emit(report, out, figures=not args.no_figures)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except RunFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(format_summary(report))
    print("--- files ---")
    for p in paths:
        print(p)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
