# src/msdpn/numpy_utils.py
import math
import logging
from typing import Sequence, Tuple, Union

import numpy as np

module_logger = logging.getLogger(__name__)


def nearest_rank_percentile(values: Union[Sequence[float], np.ndarray], percent: float) -> float:
    """
    Returns the nearest-rank percentile of a sample.

    The value is the element of rank ``ceil(percent/100 * n)`` in the sorted
    sample (ranks start at 1; rank 0 is clamped to 1), so the result is always
    an observed value.

    Args:
        values (Sequence[float] | np.ndarray): Non-empty sample.
        percent (float): Percentile in [0, 100].

    Returns:
        float: The selected sample value.

    Raises:
        ValueError: If the sample is empty or `percent` is outside [0, 100].
    """
    data = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if data.size == 0:
        raise ValueError("Cannot compute a percentile of an empty sample.")
    if not 0.0 <= percent <= 100.0:
        raise ValueError(f"Percentile must lie in [0, 100], got {percent}.")
    rank = max(1, math.ceil(round(percent / 100.0 * data.size, 9)))
    return float(data[rank - 1])


def population_mean_std(values: Union[Sequence[float], np.ndarray],
                        logger_instance: logging.Logger = None) -> Tuple[float, float]:
    """
    Mean and population standard deviation with 64-bit accumulation.

    Args:
        values (Sequence[float] | np.ndarray): Non-empty sample.
        logger_instance (logging.Logger, optional): Logger instance for messages.
                                                  If None, uses module_logger.

    Returns:
        Tuple[float, float]: (mean, std) where std divides by n.
    """
    log = logger_instance if logger_instance is not None else module_logger
    data = np.asarray(values, dtype=np.float64).ravel()
    if data.size == 0:
        raise ValueError("Cannot compute moments of an empty sample.")
    mean = float(data.mean())
    std = float(np.sqrt(np.mean((data - mean) ** 2)))
    log.debug(f"Moments over {data.size} values: mean={mean:.6g}, std={std:.6g}")
    return mean, std


def round_half_away(values: Union[float, np.ndarray]) -> np.ndarray:
    """Round to the nearest integer, ties away from zero (numpy rounds ties to even)."""
    values = np.asarray(values, dtype=np.float64)
    return np.sign(values) * np.floor(np.abs(values) + 0.5)
