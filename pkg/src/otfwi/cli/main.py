"""Command-line entry point.

    otfwi scan-shift|scan-dilation|landscape|invert \
        --config <file> --out <dir> [--workers N]

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import pathlib
import sys

from .config import ConfigError, ExperimentKind, load_config
from .experiments import run_experiment

_COMMANDS = {
    "scan-shift": ExperimentKind.SHIFT_SCAN,
    "scan-dilation": ExperimentKind.DILATION_SCAN,
    "landscape": ExperimentKind.LANDSCAPE,
    "invert": ExperimentKind.INVERT,
}


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="otfwi",
        description="Optimal-transport misfit experiments for 2D acoustic "
                    "full waveform inversion",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True,
                       help="experiment configuration file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--workers", type=int, default=1,
                       help="parallel worker count (default 1)")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    args = _build_parser().parse_args(argv)
    try:
        if args.workers < 1:
            raise ConfigError("--workers must be at least 1")
        cfg = load_config(args.config, _COMMANDS[args.command])
        out_dir = pathlib.Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
    except (ConfigError, OSError) as exc:
        print(f"otfwi: config error: {exc}", file=sys.stderr)
        return 2
    try:
        run_experiment(cfg, out_dir, workers=args.workers)
    except (ArithmeticError, ValueError, RuntimeError) as exc:
        print(f"otfwi: numerical failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
