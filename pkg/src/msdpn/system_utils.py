# src/msdpn/system_utils.py
import os
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Optional, TypeVar

from . import ConfigError

T = TypeVar("T")
R = TypeVar("R")

# Get a default logger for this module. This will be used if no specific logger
# is passed to the function.
_default_logger = logging.getLogger(__name__)

THREADS_ENV_VAR = "MSDPN_THREADS"


def resolve_worker_count(logger_instance: Optional[logging.Logger] = None) -> int:
    """
    Resolves how many worker threads commands may use.

    The ``MSDPN_THREADS`` environment variable caps the count; without it the
    machine's core count is used.

    Args:
        logger_instance (logging.Logger, optional): An optional logger instance.

    Returns:
        int: A worker count >= 1.

    Raises:
        ConfigError: If ``MSDPN_THREADS`` is set but is not a positive integer.
    """
    current_logger = logger_instance if logger_instance is not None else _default_logger
    cores = os.cpu_count() or 1
    raw = os.environ.get(THREADS_ENV_VAR)
    if raw is None or raw.strip() == "":
        return cores
    try:
        requested = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV_VAR} must be a positive integer, got '{raw}'.")
    if requested < 1:
        raise ConfigError(f"{THREADS_ENV_VAR} must be a positive integer, got '{raw}'.")
    current_logger.debug(f"{THREADS_ENV_VAR}={requested} (machine cores: {cores})")
    return requested


def ordered_map(func: Callable[[T], R], items: Iterable[T], workers: Optional[int] = None,
                logger_instance: Optional[logging.Logger] = None) -> List[R]:
    """
    Applies `func` to every item on a thread pool and returns results in input order.

    Args:
        func (Callable): Pure function applied per item.
        items (Iterable): Work items.
        workers (int, optional): Thread count; defaults to resolve_worker_count().
        logger_instance (logging.Logger, optional): An optional logger instance.

    Returns:
        List: One result per item, ordered like `items`.
    """
    current_logger = logger_instance if logger_instance is not None else _default_logger
    items = list(items)
    if workers is None:
        workers = resolve_worker_count(current_logger)
    if workers <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    current_logger.debug(f"Mapping {len(items)} items over {workers} threads.")
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, items))
