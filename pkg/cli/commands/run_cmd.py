"""
Run command: one closed-loop learning episode.
"""

import sys
from pathlib import Path

# Add project root to path
project_root = Path(__file__).parent.parent.parent
if str(project_root) not in sys.path:
    sys.path.insert(0, str(project_root))

from harness.episode import run_episode
from harness.plotting import plot_history, plot_snapshots
from harness.reporting import write_run
from safe_rl.errors import EpisodeAborted
from shared_utils.config import get_config
from shared_utils.logging_config import print_progress, print_success


def add_experiment_arguments(parser):
    """Configuration overrides shared by run and sweep."""
    parser.add_argument(
        '--set',
        action='append',
        metavar='SECTION.KEY=VALUE',
        help='Override any configuration field (value parsed as JSON); repeatable'
    )

    parser.add_argument(
        '--steps',
        type=int,
        help='Episode length'
    )

    parser.add_argument(
        '--seed',
        type=int,
        help='Random seed'
    )

    parser.add_argument(
        '--alpha',
        type=float,
        help='Learning rate in [0, 1] (0 disables learning)'
    )

    parser.add_argument(
        '--circumradius',
        type=float,
        help='Circumradius of the octagonal noise set'
    )

    parser.add_argument(
        '--theta',
        help='Comma-separated learnable blocks, e.g. M,m,K'
    )

    parser.add_argument(
        '--explore',
        action='store_true',
        help='Enable exploratory actions'
    )

    parser.add_argument(
        '--output-dir',
        help='Directory for run outputs'
    )


def add_parser(subparsers):
    """Add run command parser."""
    parser = subparsers.add_parser(
        'run',
        help='Run one closed-loop learning episode',
        description='Simulate the plant under the learning robust MPC and write CSV logs, '
                    'snapshots and SVG figures'
    )

    add_experiment_arguments(parser)

    parser.add_argument(
        '--no-svg',
        action='store_true',
        help='Skip SVG figures'
    )

    parser.add_argument(
        '--create-config',
        metavar='PATH',
        help='Write the effective configuration as JSON to PATH and exit'
    )


def run(args, logger):
    """Execute the run command."""
    logger.info("Safe RL-MPC - closed-loop learning episode")
    logger.info("=" * 50)

    config = get_config(getattr(args, 'config', None))
    config.update_from_args(args)
    config.validate()

    if getattr(args, 'create_config', None):
        print_success(f"config: {config.create_default_config_file(args.create_config)}", logger)
        return 0

    progress_settings = config.progress
    every = max(int(progress_settings["progress_every"]), 1)

    def progress(t, steps, record):
        if progress_settings["show_progress"] and ((t + 1) % every == 0 or t + 1 == steps):
            print_progress(t + 1, steps, f"V={record.V:.4g}, d_N[0]={record.d_N[0]:.4g}", logger)

    try:
        log = run_episode(config, progress)
    except EpisodeAborted as e:
        logger.error(f"Episode aborted: {e}")
        return 1

    output_dir = Path(config.output["output_dir"])
    paths = write_run(log, output_dir, config.output["float_format"])
    for name, path in paths.items():
        print_success(f"{name}: {path}", logger)

    if config.output["write_svg"]:
        snapshots = [snap.to_dict() for snap in log.snapshots]
        for path in plot_snapshots(snapshots, output_dir):
            print_success(f"figure: {path}", logger)
        print_success(f"figure: {plot_history(log.records_frame(), output_dir / 'history.svg')}", logger)

    summary = log.summary()
    logger.info(f"Steps: {summary['steps']}, violations: {summary['violations']}, "
                f"slack steps: {summary['slack_steps']}, accepted updates: {summary['accepted_updates']}, "
                f"closed-loop cost: {summary['closed_loop_cost']:.6g}")
    unexplained = log.unexplained_violations()
    if unexplained:
        logger.error(f"Unexplained safety violations at steps {unexplained}")
        return 3
    return 0
