"""
Command-line entry point: simulate | check | compare.

    python -m backend.app simulate --config config/presets/cev_gamma2.json --paths 200
"""

import argparse
import logging
import sys
from typing import List, Optional

from dotenv import load_dotenv

from backend.api.commands import (
    EXIT_CHECK_FAILED,
    EXIT_CONFIG,
    EXIT_COUPLING,
    cmd_check,
    cmd_compare,
    cmd_simulate,
)
from config.config import config, load_config_from_env
from forward_curves.errors import ConfigError, CouplingError, ModelSpecError

COMMANDS = {
    'simulate': cmd_simulate,
    'check': cmd_check,
    'compare': cmd_compare,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='fwdcurve',
        description='Forward-curve SPDE simulation, condition checks and fixed-delivery comparison',
    )
    subparsers = parser.add_subparsers(dest='command', required=True)
    for name, fn in COMMANDS.items():
        sub = subparsers.add_parser(name, help=fn.__doc__)
        sub.add_argument('--config', required=True, help='Path to the JSON run configuration')
        sub.add_argument('--seed', type=int, help='Override sim.master_seed')
        sub.add_argument('--paths', type=int, help='Override sim.n_paths')
        sub.add_argument('--dt', type=float, help='Override sim.dt')
        sub.add_argument('--out', help='Override outputs.directory')
        sub.add_argument('--format', choices=['csv', 'json'], help='Table output format')
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Parse arguments, run the command and map failures to exit codes"""
    load_dotenv()
    load_config_from_env()
    config.setup_logging()
    logger = logging.getLogger(__name__)

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else 0

    overrides = {'seed': args.seed, 'paths': args.paths, 'dt': args.dt,
                 'out': args.out, 'format': args.format}
    try:
        return COMMANDS[args.command](args.config, overrides)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except CouplingError as e:
        logger.error(f"Coupling refused: {e}")
        return EXIT_COUPLING
    except ModelSpecError as e:
        logger.error(f"Model rejected: {e}")
        return EXIT_CHECK_FAILED
    except ValueError as e:
        logger.error(f"Invalid run parameters: {e}")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
