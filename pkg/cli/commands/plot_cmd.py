"""
Plot command: SVG figures from a finished run directory.
"""

import sys
from pathlib import Path

# Add project root to path
project_root = Path(__file__).parent.parent.parent
if str(project_root) not in sys.path:
    sys.path.insert(0, str(project_root))

from harness.plotting import plot_history, plot_snapshots
from harness.reporting import SNAPSHOTS_FILE, read_run_log, read_snapshots
from shared_utils.file_operations import find_files_by_pattern
from shared_utils.logging_config import print_success


def add_parser(subparsers):
    """Add plot command parser."""
    parser = subparsers.add_parser(
        'plot',
        help='Render SVG figures of a run',
        description='Read snapshots.json and run_log.csv of a run and write SVG figures'
    )

    parser.add_argument(
        'run_dir',
        help='Run output directory, or a directory containing several runs'
    )

    parser.add_argument(
        '--output-dir',
        help='Directory for the figures (default: the run directory)'
    )

    parser.add_argument(
        '--steps',
        type=int,
        nargs='+',
        help='Only plot snapshots at these steps'
    )


def _plot_run(run_dir: Path, output_dir: Path, steps, logger) -> bool:
    snapshots = read_snapshots(run_dir)
    if steps:
        wanted = set(steps)
        snapshots = [snap for snap in snapshots if snap["t"] in wanted]
        missing = wanted - {snap["t"] for snap in snapshots}
        if missing:
            logger.warning(f"{run_dir}: no snapshots recorded at steps {sorted(missing)}")
    if not snapshots:
        logger.error(f"No snapshots to plot in {run_dir}")
        return False

    for path in plot_snapshots(snapshots, output_dir):
        print_success(f"figure: {path}", logger)
    print_success(f"figure: {plot_history(read_run_log(run_dir), output_dir / 'history.svg')}", logger)
    return True


def run(args, logger):
    """Execute the plot command."""
    logger.info("Safe RL-MPC - snapshot figures")
    logger.info("=" * 50)

    run_dir = Path(args.run_dir)
    if (run_dir / SNAPSHOTS_FILE).exists():
        run_dirs = [run_dir]
    else:
        # a directory of runs, e.g. one per seed
        run_dirs = [path.parent for path in find_files_by_pattern(run_dir, SNAPSHOTS_FILE, recursive=True)]
    if not run_dirs:
        logger.error(f"No runs found under {run_dir}")
        return 1

    failures = 0
    for directory in run_dirs:
        if args.output_dir:
            output_dir = Path(args.output_dir) / directory.relative_to(run_dir)
        else:
            output_dir = directory
        if not _plot_run(directory, output_dir, args.steps, logger):
            failures += 1
    return 1 if failures else 0
