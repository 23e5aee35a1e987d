"""Logging configuration."""
import logging
import os
import sys
from datetime import datetime
from typing import Optional

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
DATE_FORMAT = '%Y-%m-%d %H:%M:%S'

# Third-party loggers held at WARNING
QUIET_LOGGERS = ('urllib3', 'backoff')


def get_timestamped_log_filename(base_name: str = "densesteer", logs_dir: str = "logs") -> str:
    """
    Generate a timestamped log filename, creating the logs directory.

    Returns:
        Path such as logs/densesteer_20260116_133925.log
    """
    os.makedirs(logs_dir, exist_ok=True)
    timestamp = datetime.now().strftime('%Y%m%d_%H%M%S')
    return os.path.join(logs_dir, f"{base_name}_{timestamp}.log")


def _owned(handler: logging.Handler, level: int) -> logging.Handler:
    handler.setLevel(level)
    handler.setFormatter(logging.Formatter(LOG_FORMAT, datefmt=DATE_FORMAT))
    handler._densesteer = True
    return handler


def setup_logging(level: str = "INFO", log_file: Optional[str] = None, use_timestamp: bool = False) -> str:
    """
    Configure CLI logging.

    Console output always goes to stderr so that nothing but declared data
    files carry results. File logging is opt-in. Calling this again replaces
    the handlers installed by the previous call.

    Args:
        level: Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL)
        log_file: Optional log file path, appended to
        use_timestamp: If True and log_file is None, creates a timestamped log file

    Returns:
        Path to the log file being used, or "" for console only
    """
    log_level = getattr(logging, level.upper(), logging.INFO)
    root_logger = logging.getLogger()
    root_logger.setLevel(log_level)
    for handler in list(root_logger.handlers):
        if getattr(handler, '_densesteer', False):
            root_logger.removeHandler(handler)
            handler.close()

    root_logger.addHandler(_owned(logging.StreamHandler(sys.stderr), log_level))

    actual_log_file = log_file
    if actual_log_file is None and use_timestamp:
        actual_log_file = get_timestamped_log_filename()
    if actual_log_file:
        log_dir = os.path.dirname(actual_log_file)
        if log_dir:
            os.makedirs(log_dir, exist_ok=True)
        file_handler = logging.FileHandler(actual_log_file, mode='a', encoding='utf-8')
        root_logger.addHandler(_owned(file_handler, log_level))

    for name in QUIET_LOGGERS:
        logging.getLogger(name).setLevel(logging.WARNING)
    return actual_log_file or ""
