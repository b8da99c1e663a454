#!/usr/bin/env python3
"""
fracbayes - fractional-posterior Bayesian model selection
Command line entry point for single runs and experiment grids
"""

import argparse
import asyncio
import logging
import sys
from typing import List, Optional

from config import DEFAULT_WORKERS, LOG_FILE, LOG_LEVEL
from fracbayes import __version__
from fracbayes.handlers import COMMANDS, dispatch

logger = logging.getLogger(__name__)


def configure_logging():
    """File and console logging, configured once per process"""
    logging.basicConfig(
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        level=getattr(logging, LOG_LEVEL.upper(), logging.INFO),
        handlers=[
            logging.FileHandler(LOG_FILE),
            logging.StreamHandler()
        ]
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fracbayes",
        description="Fractional posteriors, GP and mixture variable selection, kernel eigensystems",
    )
    parser.add_argument("--version", action="version", version=f"fracbayes {__version__}")
    subparsers = parser.add_subparsers(dest="command", required=True)

    for name, handler in COMMANDS.items():
        sub = subparsers.add_parser(name, help=(handler.__doc__ or "").strip().splitlines()[0])
        direct = name == "kernel-spectrum"
        sub.add_argument("--config", required=not direct, help="JSON document describing the run")
        sub.add_argument("--workers", type=int, default=DEFAULT_WORKERS,
                         help="worker threads (default: %(default)s)")
        sub.add_argument("--out", default=None, help="output directory")
        if direct:
            sub.add_argument("--family", help="se or matern")
            sub.add_argument("--a", type=float, help="inverse bandwidth")
            sub.add_argument("--nu", type=float, help="Matern smoothness")
            sub.add_argument("--m", type=int, help="number of eigenvalues")
            sub.add_argument("--grid-size", dest="grid_size", type=int, help="Gram oracle grid size")
        if name == "divergence":
            sub.add_argument("--measure", help="hellinger, kl, v, renyi or affinity")
            sub.add_argument("--alpha", type=float, help="order of renyi and affinity")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Parse arguments, run the subcommand and return its exit code"""
    args = build_parser().parse_args(argv)
    if args.workers < 1:
        args.workers = 1

    configure_logging()
    logger.info(f"fracbayes {__version__}: {args.command} --config {args.config}")
    try:
        return asyncio.run(dispatch(args))
    except KeyboardInterrupt:
        logger.info("Interrupted by user")
        return 130


if __name__ == '__main__':
    sys.exit(main())
