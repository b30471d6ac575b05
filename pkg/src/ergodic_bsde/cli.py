"""Command-line experiment runner.

    ergodic-bsde run <config> [--threads N]
    ergodic-bsde validate <config>
    ergodic-bsde presets

Exit codes: 0 all checks passed, 1 a check failed (or a computation
error, reported with its module), 2 usage or config errors.  The
environment variable ERGODIC_BSDE_OUTPUT_DIR overrides where outputs
land without changing the recorded plan.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

from .config import ConfigError, parse_config
from .model import preset_names
from .runner import run


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ergodic-bsde",
        description="declarative experiments on ergodic BSDEs and HJB asymptotics")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute an experiment config")
    p_run.add_argument("config", help="path to the config file")
    p_run.add_argument("--threads", type=int, default=None,
                       help="cap worker threads (never changes results)")

    p_val = sub.add_parser("validate", help="parse and validate a config")
    p_val.add_argument("config", help="path to the config file")

    sub.add_parser("presets", help="list the named analytic presets")
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0

    if args.command == "presets":
        for name in preset_names():
            print(name)
        return 0

    try:
        with open(args.config) as fh:
            text = fh.read()
    except OSError as exc:
        print("error: cannot read config: %s" % exc, file=sys.stderr)
        return 2
    try:
        plan = parse_config(text)
    except ConfigError as exc:
        print("config error: %s" % exc, file=sys.stderr)
        return 2

    if args.command == "validate":
        print("config ok: %s experiment" % plan.experiment.value)
        return 0

    if args.threads is not None:
        plan = dataclasses.replace(plan, threads=max(1, args.threads))
    output_dir = os.environ.get("ERGODIC_BSDE_OUTPUT_DIR") or None
    try:
        result = run(plan, output_dir=output_dir)
    except Exception as exc:  # computation failures carry their module
        print("error [%s.%s]: %s" % (type(exc).__module__, type(exc).__name__, exc),
              file=sys.stderr)
        return 1
    for verdict in result.verdicts:
        print("%s %s: %s" % ("PASS" if verdict.passed else "FAIL",
                             verdict.name, verdict.detail))
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
