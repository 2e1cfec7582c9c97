#!/usr/bin/env python3
"""Run the full desk-scale experiment (all three phases) and print the
per-phase Base / Novel / All table.

Usage:
    python scripts/run_desk_experiment.py [--config configs/desk.json] [--seed N]
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from incdet.cli import main as cli_main


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default="configs/desk.json")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--output-dir", default=None)
    args = parser.parse_args()

    argv = ["run-all", "--config", args.config]
    if args.seed is not None:
        argv += ["--seed", str(args.seed)]
    if args.output_dir is not None:
        argv += ["--output-dir", str(args.output_dir)]
    code = cli_main(argv)
    if code != 0:
        return code
    report_argv = ["report", "--config", args.config]
    if args.output_dir is not None:
        report_argv += ["--output-dir", str(args.output_dir)]
    return cli_main(report_argv)


if __name__ == "__main__":
    sys.exit(main())
