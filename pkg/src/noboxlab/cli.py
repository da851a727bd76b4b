"""Command-line entry point: `noboxlab <command> --config <path> [--seed N] [--dry-run]`."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections.abc import Sequence

from noboxlab.config import load_config
from noboxlab.exceptions import ConfigError, DisjointnessError
from noboxlab.lab import COMMANDS, LOG_FORMAT, run_pipeline

logger = logging.getLogger("noboxlab.cli")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DISJOINT = 3
EXIT_RUNTIME = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="noboxlab",
        description="No-box transfer attacks from margin fine-tuned surrogates.",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument(
        "--config",
        action="append",
        default=[],
        help="config file of dotted.key=value lines; repeat to layer (later wins)",
    )
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override one config key, e.g. --set margin.m=0.2",
    )
    parser.add_argument("--seed", type=int, default=None, help="override the run seed")
    parser.add_argument("--dry-run", action="store_true", help="print the plan and stop")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO, format=LOG_FORMAT
    )

    try:
        settings = load_config(args.config, args.overrides, args.seed)
        manifest = run_pipeline(settings, args.command, dry_run=args.dry_run)
    except ConfigError as exc:
        logger.error("invalid configuration: %s", exc)
        return EXIT_CONFIG
    except DisjointnessError as exc:
        logger.error("refusing to run: %s", exc)
        return EXIT_DISJOINT
    except Exception as exc:
        logger.exception("run failed: %s", exc)
        return EXIT_RUNTIME

    if args.dry_run:
        print(json.dumps(settings.model_dump(mode="json"), indent=2, sort_keys=True))
        for number, step in enumerate(manifest.plan, start=1):
            print(f"{number}. {step}")
    else:
        print(json.dumps(manifest.to_dict(), indent=2))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
