#!/usr/bin/env python3
"""
Main CLI entry point for the safe RL-MPC simulator.
Provides a unified command-line interface with subcommands.
"""

import argparse
import sys

from safe_rl import __version__
from shared_utils.config import ExperimentConfig, get_config
from shared_utils.logging_config import logging_settings, setup_logging
from cli.commands import run_cmd, check_cmd, plot_cmd, sweep_cmd

# Command registry for dynamic dispatch
COMMANDS = {
    'run': run_cmd,
    'check': check_cmd,
    'plot': plot_cmd,
    'sweep': sweep_cmd,
}


def create_main_parser():
    """Create the main argument parser with subcommands."""
    parser = argparse.ArgumentParser(
        prog='saferl',
        description='Safe Q-learning with tube-based robust linear MPC',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  saferl run --steps 200 --output-dir runs/default
  saferl run --theta M,m,K --set noise.initial_set='"bounding_box"'
  saferl check --quick
  saferl check tightening hull
  saferl plot runs/default --steps 0 110
  saferl sweep --episodes 50 --compare-k
        """
    )

    # Global arguments
    parser.add_argument(
        '--log-level',
        choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'],
        default=None,
        help='Set the logging level (default: progress.log_level from the config, INFO)'
    )

    parser.add_argument(
        '--config',
        help='Path to JSON configuration file'
    )

    parser.add_argument(
        '--no-color',
        action='store_true',
        help='Disable colored console output'
    )

    parser.add_argument(
        '--version',
        action='version',
        version=f'saferl {__version__}'
    )

    # Create subparsers
    subparsers = parser.add_subparsers(
        dest='command',
        help='Available commands',
        metavar='COMMAND'
    )

    # Add subcommands dynamically
    for command_module in COMMANDS.values():
        command_module.add_parser(subparsers)

    return parser


def _progress_section(config_file):
    """Progress settings of the config; defaults when it cannot be read yet."""
    try:
        return get_config(config_file).progress
    except (FileNotFoundError, ValueError):
        # the command reports the problem once logging is up
        return dict(ExperimentConfig.DEFAULT_PROGRESS_CONFIG)


def main(argv=None):
    """Main CLI entry point."""
    parser = create_main_parser()
    args = parser.parse_args(argv)

    # Setup logging; the command line overrides the progress section of the config
    level, use_colors = logging_settings(_progress_section(args.config), args.log_level, args.no_color)
    logger = setup_logging(level=level, use_colors=use_colors)

    # Show help if no command provided
    if not args.command:
        parser.print_help()
        return 0

    try:
        # Execute the appropriate command dynamically
        command_module = COMMANDS.get(args.command)
        if command_module:
            return command_module.run(args, logger)
        else:
            logger.error(f"Unknown command: {args.command}")
            return 2

    except KeyboardInterrupt:
        logger.info("Operation cancelled by user")
        return 130  # Standard UNIX exit code for SIGINT
    except FileNotFoundError as e:
        logger.error(f"File not found: {e}")
        return 2
    except PermissionError as e:
        logger.error(f"Permission denied: {e}")
        return 77  # Standard UNIX exit code for permission denied
    except Exception as e:
        logger.error(f"Command failed: {e}")
        logger.debug("Full error details:", exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
