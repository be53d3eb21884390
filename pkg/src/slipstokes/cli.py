"""Command-line entry point: ``slipstokes <verb> [--config PATH] [--seed N] [--out DIR]``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys

from .config import EXPERIMENTS, FORMATS, ConfigError, default_config, parse_config
from .runner import EXIT_CONFIG, EXIT_INTERNAL, list_experiments, run_experiment


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slipstokes",
                                     description="Stokes flow with slip: experiments")
    parser.add_argument("verb", choices=EXPERIMENTS + ("list",))
    parser.add_argument("--config", help="TOML or JSON run configuration")
    parser.add_argument("--seed", type=int, help="override the configured seed")
    parser.add_argument("--out", help="override the output directory")
    parser.add_argument("--format", help=f"comma-separated subset of {','.join(FORMATS)}")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.verb == "list":
        print(json.dumps(list_experiments(), indent=2, sort_keys=True))
        return 0
    try:
        cfg = parse_config(args.config, args.verb) if args.config else default_config(args.verb)
        changes = {}
        if args.seed is not None:
            changes["seed"] = args.seed
        if args.out is not None or args.format is not None:
            out = cfg.output
            if args.out is not None:
                out = dataclasses.replace(out, dir=args.out)
            if args.format is not None:
                out = dataclasses.replace(out, formats=tuple(f.strip() for f in args.format.split(",") if f.strip()))
            changes["output"] = out
        if changes:
            cfg = cfg.replace(**changes)
    except ConfigError as exc:
        print(json.dumps({"status": EXIT_CONFIG, "error": exc.to_dict()}, indent=2), file=sys.stderr)
        return EXIT_CONFIG
    try:
        outcome = run_experiment(cfg)
    except Exception as exc:  # noqa: BLE001 - last-resort report
        print(json.dumps({"status": EXIT_INTERNAL, "error": {"type": "internal",
                          "message": str(exc)}}), file=sys.stderr)
        return EXIT_INTERNAL
    summary = outcome.summary
    line = {"experiment": summary["experiment"], "status": outcome.status,
            "passed": summary.get("passed", False), "summary": str(outcome.summary_path),
            "summary_hash": outcome.summary_hash}
    if "error" in summary:
        line["error"] = summary["error"]
    print(json.dumps(line, indent=2))
    return outcome.status


if __name__ == "__main__":
    sys.exit(main())
