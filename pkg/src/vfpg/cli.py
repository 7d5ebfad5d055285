"""Command-line front end.

Subcommands ``train``, ``scan``, ``ground-state``, ``diagnose``, and
``oracle`` each take ``--config <path>``, ``--out <dir>``, and an optional
``--seed <u64>`` overriding the configured master seed.  The config kind must
match the subcommand.  All artifacts land inside the output directory; nothing
outside it is touched.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from .config import EXPERIMENT_KINDS, ConfigError, parse_config
from .experiments import run_experiment


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vfpg",
        description="Variational Feynman path generator experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for kind in EXPERIMENT_KINDS:
        p = sub.add_parser(kind, help=f"run a '{kind}' experiment")
        p.add_argument("--config", required=True, help="configuration file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override the master seed")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with open(args.config, "r", encoding="utf-8") as fh:
            config = parse_config(fh.read())
    except OSError as err:
        print(f"error: cannot read config: {err}", file=sys.stderr)
        return 2
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    if config.kind != args.command:
        print(f"error: config kind {config.kind!r} does not match "
              f"subcommand {args.command!r}", file=sys.stderr)
        return 2
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    try:
        files = run_experiment(config, args.out)
    except Exception as err:  # keep partial outputs, report, fail
        print(f"error: experiment failed: {err}", file=sys.stderr)
        return 1
    for name in files:
        print(name)
    return 0


if __name__ == "__main__":
    sys.exit(main())
