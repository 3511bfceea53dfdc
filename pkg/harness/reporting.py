"""
Run outputs: CSV logs, snapshot and config JSON.
"""

import logging
from pathlib import Path
from typing import Any, Dict, List, Union

import pandas as pd

from shared_utils.file_operations import (ensure_directory_exists, load_csv_file, load_json,
                                          save_dataframe, save_json)

from .episode import RunLog

logger = logging.getLogger(__name__)

RUN_LOG_FILE = "run_log.csv"
RESIDUALS_FILE = "residuals.csv"
LEARNING_FILE = "learning.csv"
SNAPSHOTS_FILE = "snapshots.json"
CONFIG_FILE = "config.json"
SUMMARY_FILE = "summary.json"


def write_run(log: RunLog, output_dir: Union[str, Path],
              float_format: str = "%.17g") -> Dict[str, Path]:
    """Write every artifact of a run into output_dir.

    Returns:
        Mapping of artifact name to path
    """
    out = ensure_directory_exists(output_dir)
    paths = {
        "run_log": out / RUN_LOG_FILE,
        "residuals": out / RESIDUALS_FILE,
        "learning": out / LEARNING_FILE,
        "snapshots": out / SNAPSHOTS_FILE,
        "config": out / CONFIG_FILE,
        "summary": out / SUMMARY_FILE,
    }
    save_dataframe(log.records_frame(), paths["run_log"], float_format=float_format)
    save_dataframe(log.residuals_frame(), paths["residuals"], float_format=float_format)
    save_dataframe(log.learning_frame(), paths["learning"], float_format=float_format)
    save_json([snap.to_dict() for snap in log.snapshots], paths["snapshots"])
    save_json(log.config, paths["config"])
    save_json(log.summary(), paths["summary"])
    return paths


def read_run_log(run_dir: Union[str, Path]) -> pd.DataFrame:
    return load_csv_file(Path(run_dir) / RUN_LOG_FILE)


def read_learning_log(run_dir: Union[str, Path]) -> pd.DataFrame:
    return load_csv_file(Path(run_dir) / LEARNING_FILE)


def read_snapshots(run_dir: Union[str, Path]) -> List[Dict[str, Any]]:
    """Snapshot dictionaries of a run, ordered by step."""
    snapshots = load_json(Path(run_dir) / SNAPSHOTS_FILE)
    return sorted(snapshots, key=lambda snap: snap["t"])
