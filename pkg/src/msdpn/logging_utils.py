import os
import logging
import sys

LOG_FILE_ENV_VAR = "MSDPN_LOG_FILE"
LOG_FORMAT = '%(asctime)s - %(levelname)s - %(module)s:%(lineno)d - %(message)s'


def setup_logger(script_name: str, log_directory_base: str = None, log_level=logging.INFO,
                 shared_log_file_path: str = None, force_new_log: bool = False):
    """
    Sets up the root logger for a command run: one log file plus the console.

    Args:
        script_name (str): Name of the command (e.g., "train"); names the log file
                           when no shared log file is in use.
        log_directory_base (str, optional): Directory in which a 'logs' folder is
                                            created. Defaults to the current working
                                            directory.
        log_level (int, optional): The logging level. Defaults to logging.INFO.
        shared_log_file_path (str, optional): Explicit log file shared by chained
                                              commands. Falls back to the
                                              MSDPN_LOG_FILE environment variable.
        force_new_log (bool, optional): Truncate the log file even when it is shared.
                                        Individual command logs always start fresh;
                                        shared logs are appended to otherwise.

    Returns:
        tuple[logging.Logger, str]: The configured root logger and the log file path.
    """
    shared_path = shared_log_file_path or os.environ.get(LOG_FILE_ENV_VAR)
    if shared_path:
        log_file_path = os.path.abspath(shared_path)
        mode = 'w' if force_new_log else 'a'
    else:
        base = log_directory_base if log_directory_base is not None else os.getcwd()
        log_file_path = os.path.join(base, "logs", f"{script_name}.log")
        mode = 'w'
    os.makedirs(os.path.dirname(log_file_path), exist_ok=True)

    root = logging.getLogger()
    root.setLevel(log_level)
    # a second command in the same process must not write every line twice
    for stale in list(root.handlers):
        root.removeHandler(stale)
        stale.close()

    formatter = logging.Formatter(LOG_FORMAT)
    for handler in (logging.FileHandler(log_file_path, mode=mode, encoding="utf-8"),
                    logging.StreamHandler(sys.stdout)):
        handler.setLevel(log_level)
        handler.setFormatter(formatter)
        root.addHandler(handler)

    return root, log_file_path


def parse_log_level(name: str) -> int:
    """Maps 'DEBUG'/'INFO'/... to the logging constant; raises ValueError otherwise."""
    level = getattr(logging, str(name).upper(), None)
    if not isinstance(level, int):
        raise ValueError(f"Invalid log level specified: '{name}'. "
                         f"Must be one of: DEBUG, INFO, WARNING, ERROR, CRITICAL.")
    return level
