# msdpn/data_utils.py

"""
Data Utilities for the CSV reports written by the experiment drivers
(metrics reports, loss traces, dropout sweeps).
"""

import logging
from pathlib import Path
from typing import Any, List, Optional, Union

import pandas as pd

from . import ConfigError

logger = logging.getLogger(__name__)  # Module-level logger


def save_dataframe_to_csv(df: pd.DataFrame, file_path: Union[str, Path],
                          logger_instance: Optional[logging.Logger] = None, **kwargs: Any) -> Path:
    """
    Saves a pandas DataFrame to a CSV file, ensuring the output directory exists.

    Floats are written with their shortest round-trip representation so that
    re-running a command reproduces identical bytes.

    Args:
        df (pd.DataFrame): The DataFrame to save.
        file_path (str | Path): Destination path.
        logger_instance (logging.Logger, optional): Logger for status/errors.
        **kwargs: Passed to DataFrame.to_csv; 'index=False' and
                  'lineterminator="\\n"' are defaults that may be overridden.

    Returns:
        Path: The written path.
    """
    current_logger = logger_instance if logger_instance is not None else logger
    file_path = Path(file_path)
    try:
        file_path.parent.mkdir(parents=True, exist_ok=True)
        kwargs.setdefault('index', False)
        kwargs.setdefault('lineterminator', '\n')
        df.to_csv(file_path, **kwargs)
        current_logger.info(f"DataFrame ({len(df)} rows) saved to {file_path}")
        return file_path
    except Exception as e:
        current_logger.critical(f"Failed to save DataFrame to {file_path}: {e}")
        raise


def load_dataframe_from_csv(file_path: Union[str, Path], logger_instance: Optional[logging.Logger] = None,
                            **kwargs: Any) -> pd.DataFrame:
    """
    Loads a report or trace CSV. An empty file gives an empty DataFrame.

    Raises:
        FileNotFoundError: If the file does not exist.
        pd.errors.ParserError: If the CSV cannot be parsed.
    """
    log = logger_instance if logger_instance is not None else logger
    path = Path(file_path)
    if not path.is_file():
        log.error(f"CSV report {path} does not exist")
        raise FileNotFoundError(f"CSV file not found: {path}")
    try:
        frame = pd.read_csv(path, **kwargs)
    except pd.errors.EmptyDataError:
        log.warning(f"{path} is empty; no rows loaded")
        return pd.DataFrame()
    except pd.errors.ParserError as e:
        log.error(f"Could not parse {path}: {e}")
        raise
    log.debug(f"{len(frame)} rows read from {path}")
    return frame


def select_existing_columns(df: pd.DataFrame, desired_columns: List[str],
                            logger_instance: Optional[logging.Logger] = None) -> pd.DataFrame:
    """
    Selects columns in the given order, refusing silently incomplete reports.

    Raises:
        ConfigError: If any of `desired_columns` is missing.
    """
    current_logger = logger_instance if logger_instance is not None else logger
    missing_columns = [col for col in desired_columns if col not in df.columns]
    if missing_columns:
        current_logger.error(f"Report is missing columns: {missing_columns}")
        raise ConfigError(f"Report is missing columns: {missing_columns}")
    return df[desired_columns]
