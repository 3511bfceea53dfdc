"""
Check command: oracle and Monte-Carlo acceptance suites.
"""

import sys
from pathlib import Path

# Add project root to path
project_root = Path(__file__).parent.parent.parent
if str(project_root) not in sys.path:
    sys.path.insert(0, str(project_root))

from harness.checks import CHECKS, check_names, run_checks
from shared_utils.config import get_config
from shared_utils.logging_config import print_success


def add_parser(subparsers):
    """Add check command parser."""
    parser = subparsers.add_parser(
        'check',
        help='Run property and oracle suites',
        description='Available checks:\n' + '\n'.join(
            f'  {name:16s} {description}' for name, _, description in CHECKS)
    )

    parser.add_argument(
        'names',
        nargs='*',
        metavar='CHECK',
        help=f'Checks to run (default: all of {", ".join(check_names())})'
    )

    parser.add_argument(
        '--quick',
        action='store_true',
        help='Fewer trials and shorter episodes'
    )

    parser.add_argument(
        '--set',
        action='append',
        metavar='SECTION.KEY=VALUE',
        help='Override any configuration field (value parsed as JSON); repeatable'
    )


def run(args, logger):
    """Execute the check command."""
    logger.info("Safe RL-MPC - acceptance checks")
    logger.info("=" * 50)

    config = get_config(getattr(args, 'config', None))
    config.apply_overrides(args.set)
    config.validate()

    results = run_checks(config, args.names or None, quick=args.quick)
    for result in results:
        if result.passed:
            print_success(f"{result.name}: {result.message} ({result.seconds:.1f}s)", logger)
        else:
            logger.error(f"✗ {result.name}: {result.message} ({result.seconds:.1f}s)")

    failed = [r.name for r in results if not r.passed]
    logger.info(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0
