"""
Common file operations for experiment outputs.
Contains functions for handling directories, CSV logs and JSON documents.
"""

import json
from pathlib import Path
from typing import Any, List, Union

import numpy as np
import pandas as pd

from .logging_config import get_logger


def ensure_directory_exists(directory_path: Union[str, Path],
                            create_parents: bool = True) -> Path:
    """Ensure a directory exists, creating it if necessary.

    Args:
        directory_path: Path to the directory
        create_parents: Whether to create parent directories

    Returns:
        Path object for the directory
    """
    path = Path(directory_path)
    path.mkdir(parents=create_parents, exist_ok=True)
    return path


def find_files_by_pattern(directory: Union[str, Path],
                          pattern: str,
                          recursive: bool = False) -> List[Path]:
    """Find files matching a pattern in a directory, sorted by name.

    Args:
        directory: Directory to search in
        pattern: File pattern (e.g., "snapshots.json", "*.csv")
        recursive: Whether to search subdirectories
    """
    logger = get_logger()
    path = Path(directory)

    if not path.exists():
        logger.warning(f"Directory not found: {path}")
        return []

    files = sorted(path.rglob(pattern) if recursive else path.glob(pattern))
    logger.debug(f"Found {len(files)} files matching '{pattern}' in {path}")
    return files


def load_csv_file(file_path: Union[str, Path]) -> pd.DataFrame:
    """Load a CSV log into a DataFrame.

    Raises:
        FileNotFoundError: if the file does not exist
    """
    logger = get_logger()
    file_path = Path(file_path)

    if not file_path.exists():
        raise FileNotFoundError(f"CSV file not found: {file_path}")

    df = pd.read_csv(file_path, float_precision="round_trip")
    logger.debug(f"Loaded CSV file: {file_path} ({len(df)} rows)")
    return df


def save_dataframe(df: pd.DataFrame,
                   file_path: Union[str, Path],
                   format_type: str = 'csv',
                   float_format: str = '%.17g',
                   **kwargs) -> None:
    """Save a DataFrame as CSV (17 significant digits by default) or JSON records.

    Args:
        df: DataFrame to save
        file_path: Output file path
        format_type: File format ('csv', 'json')
        float_format: printf-style float format for CSV
        **kwargs: Additional arguments for pandas save methods
    """
    logger = get_logger()
    file_path = Path(file_path)
    ensure_directory_exists(file_path.parent)

    try:
        if format_type.lower() == 'csv':
            df.to_csv(file_path, index=False, float_format=float_format, **kwargs)
        elif format_type.lower() == 'json':
            df.to_json(file_path, orient='records', indent=2, double_precision=15, **kwargs)
        else:
            raise ValueError(f"Unsupported format: {format_type}")

        logger.info(f"Saved DataFrame to {file_path} ({len(df)} rows)")

    except Exception as e:
        logger.error(f"Failed to save DataFrame to {file_path}: {e}")
        raise


def _to_jsonable(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer, np.bool_)):
        return value.item()
    if isinstance(value, dict):
        return {str(k): _to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_to_jsonable(v) for v in value]
    return value


def save_json(data: Any, file_path: Union[str, Path], indent: int = 2) -> Path:
    """Write a JSON document, converting numpy values."""
    logger = get_logger()
    file_path = Path(file_path)
    ensure_directory_exists(file_path.parent)
    with open(file_path, 'w') as f:
        json.dump(_to_jsonable(data), f, indent=indent)
    logger.info(f"Saved JSON to {file_path}")
    return file_path


def load_json(file_path: Union[str, Path]) -> Any:
    """Read a JSON document.

    Raises:
        FileNotFoundError: if the file does not exist
    """
    file_path = Path(file_path)
    if not file_path.exists():
        raise FileNotFoundError(f"JSON file not found: {file_path}")
    with open(file_path, 'r') as f:
        return json.load(f)
