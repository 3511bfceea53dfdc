"""
Sweep command: seeded Monte-Carlo episodes in a process pool.
"""

import sys
from pathlib import Path

# Add project root to path
project_root = Path(__file__).parent.parent.parent
if str(project_root) not in sys.path:
    sys.path.insert(0, str(project_root))

from harness.sweep import compare_k, run_sweep, sweep_frame
from shared_utils.config import get_config
from shared_utils.file_operations import save_dataframe
from shared_utils.logging_config import print_progress, print_success

from .run_cmd import add_experiment_arguments


def add_parser(subparsers):
    """Add sweep command parser."""
    parser = subparsers.add_parser(
        'sweep',
        help='Run many seeded episodes',
        description='Monte-Carlo episodes with independent seeds spawned from run.seed'
    )

    add_experiment_arguments(parser)

    parser.add_argument(
        '--episodes',
        type=int,
        default=50,
        help='Number of episodes (default: 50)'
    )

    parser.add_argument(
        '--workers',
        type=int,
        help='Worker processes (default: CPU count)'
    )

    parser.add_argument(
        '--compare-k',
        action='store_true',
        help='Paired seeds with and without K among the learned parameters'
    )


def run(args, logger):
    """Execute the sweep command."""
    logger.info("Safe RL-MPC - Monte-Carlo sweep")
    logger.info("=" * 50)

    config = get_config(getattr(args, 'config', None))
    config.update_from_args(args)
    config.output["write_svg"] = False
    config.validate()
    output_dir = Path(config.output["output_dir"])

    def progress(done, total):
        if config.progress["show_progress"]:
            print_progress(done, total, "episodes", logger)

    if args.compare_k:
        frame = compare_k(config, args.episodes, args.workers, progress)
        path = output_dir / "compare_k.csv"
        save_dataframe(frame, path, float_format=config.output["float_format"])
        print_success(f"comparison: {path}", logger)
        valid = frame[~frame["aborted"]]
        logger.info(f"Learned K: cost not higher in {int((valid['cost_k'] <= valid['cost_base']).sum())}"
                    f"/{len(frame)} pairs, terminal area not smaller in "
                    f"{int((valid['area_k'] >= valid['area_base']).sum())}/{len(frame)}")
        unexplained = int(frame["unexplained_base"].sum() + frame["unexplained_k"].sum())
    else:
        summaries = run_sweep(config, args.episodes, args.workers, progress)
        frame = sweep_frame(summaries)
        path = output_dir / "sweep.csv"
        save_dataframe(frame, path, float_format=config.output["float_format"])
        print_success(f"sweep: {path}", logger)
        aborted = sum(1 for s in summaries if s.aborted)
        logger.info(f"{len(summaries)} episodes: {int(frame['violations'].sum())} violations, "
                    f"{int(frame['slack_steps'].sum())} slack steps, {aborted} aborted, "
                    f"mean cost {frame['closed_loop_cost'].mean():.6g}")
        unexplained = int(frame["unexplained_violations"].sum())

    if unexplained:
        logger.error(f"{unexplained} unexplained safety violations across the sweep")
        return 3
    return 0
