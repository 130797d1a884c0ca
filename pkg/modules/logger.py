"""Logging for fixformer runs: a rotating log file plus the console."""

import logging
import logging.handlers
import warnings
from pathlib import Path
from typing import Union

from modules.config import FIXFORMER_LOG_DIR, LOG_LEVEL


LOG_FILE_NAME = "fixformer.log"
LOG_MAX_BYTES = 10 * 1024 * 1024  # 10 MB
LOG_BACKUP_COUNT = 5
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
DATE_FORMAT = '%Y-%m-%d %H:%M:%S'

# Handlers added by the last setup_logging call.
_installed: list[logging.Handler] = []


def _file_handler(log_dir: Path) -> Union[logging.Handler, None]:
    try:
        log_dir.mkdir(parents=True, exist_ok=True)
        return logging.handlers.RotatingFileHandler(
            log_dir / LOG_FILE_NAME,
            maxBytes=LOG_MAX_BYTES,
            backupCount=LOG_BACKUP_COUNT,
            encoding='utf-8'
        )
    except OSError:
        warnings.warn(f"Could not create log directory {log_dir}. Using console logging only.")
        return None


def setup_logging(
    log_level: str = LOG_LEVEL, log_dir: Union[str, Path] = FIXFORMER_LOG_DIR
) -> None:
    """
    Send every record at ``log_level`` or above to ``<log_dir>/fixformer.log``
    and to stderr.

    A second call replaces the handlers of the first one; handlers that
    something else attached to the root logger stay in place.
    """
    level = logging.getLevelName(log_level.upper())
    if not isinstance(level, int):
        warnings.warn(f"Unknown log level {log_level!r}, using INFO")
        level = logging.INFO

    root_logger = logging.getLogger()
    root_logger.setLevel(level)
    for handler in _installed:
        root_logger.removeHandler(handler)
        handler.close()
    _installed.clear()

    formatter = logging.Formatter(fmt=LOG_FORMAT, datefmt=DATE_FORMAT)
    handlers = [logging.StreamHandler(), _file_handler(Path(log_dir))]
    for handler in handlers:
        if handler is None:
            continue
        handler.setLevel(level)
        handler.setFormatter(formatter)
        root_logger.addHandler(handler)
        _installed.append(handler)


def get_logger(name: str) -> logging.Logger:
    """Get a logger instance for a module."""
    return logging.getLogger(name)


def log_banner(logger: logging.Logger, title: str) -> None:
    """Mark the start of a run phase, e.g. ``=== TRAINING ===``."""
    logger.info(f"=== {title} ===")
