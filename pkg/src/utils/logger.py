"""
Logging utility for the demand engine.
Provides console/file logging and a line-delimited JSON writer for training traces.
"""

import logging
import sys
from pathlib import Path
from typing import Optional

from pythonjsonlogger import jsonlogger

from src.config import LOG_LEVEL, LOG_FORMAT, LOG_FILE


def setup_logger(
    name: str,
    log_file: Optional[Path] = None,
    level: Optional[str] = None,
    console: bool = True
) -> logging.Logger:
    """
    Set up a logger with file and console handlers.

    Args:
        name: Logger name (typically __name__)
        log_file: Path to log file (default: from config)
        level: Logging level (default: from config)
        console: Whether to add console handler

    Returns:
        Configured logger instance
    """
    logger = logging.getLogger(name)

    log_level = level or LOG_LEVEL
    logger.setLevel(getattr(logging, log_level.upper()))

    # Remove existing handlers to avoid duplicates
    logger.handlers.clear()

    formatter = logging.Formatter(LOG_FORMAT)

    if log_file is None:
        log_file = LOG_FILE

    log_file.parent.mkdir(parents=True, exist_ok=True)
    file_handler = logging.FileHandler(log_file)
    file_handler.setLevel(logging.DEBUG)
    file_handler.setFormatter(formatter)
    logger.addHandler(file_handler)

    # Console output goes to stderr so that stdout stays clean for reports
    if console:
        console_handler = logging.StreamHandler(sys.stderr)
        console_handler.setLevel(getattr(logging, log_level.upper()))
        console_handler.setFormatter(formatter)
        logger.addHandler(console_handler)

    return logger


def get_logger(name: str) -> logging.Logger:
    """
    Get or create a logger with default configuration.

    Args:
        name: Logger name (typically __name__)

    Returns:
        Logger instance
    """
    logger = logging.getLogger(name)

    if not logger.handlers:
        return setup_logger(name)

    return logger


def get_json_file_logger(name: str, path: Path) -> logging.Logger:
    """
    Create a non-propagating logger that writes one JSON object per record.

    Fields passed through ``extra=`` become JSON keys. No timestamps are
    emitted, so identical runs produce identical files.

    Args:
        name: Logger name, unique per output file
        path: Destination file (truncated on creation)

    Returns:
        Logger instance
    """
    logger = logging.getLogger(f"nfd.jsonl.{name}")
    logger.setLevel(logging.INFO)
    logger.propagate = False
    close_json_file_logger(logger)

    path.parent.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(path, mode="w")
    handler.setFormatter(jsonlogger.JsonFormatter("%(message)s"))
    logger.addHandler(handler)
    return logger


def close_json_file_logger(logger: logging.Logger) -> None:
    """Flush and detach all handlers of a JSON file logger."""
    for handler in list(logger.handlers):
        handler.flush()
        handler.close()
        logger.removeHandler(handler)


def set_package_level(level: str, prefix: str = "src") -> None:
    """Apply a level to every package logger and its console handler."""
    value = getattr(logging, level.upper())
    for name in list(logging.root.manager.loggerDict):
        if name != prefix and not name.startswith(prefix + "."):
            continue
        logger = logging.getLogger(name)
        logger.setLevel(value)
        for handler in logger.handlers:
            if isinstance(handler, logging.StreamHandler) and not isinstance(handler, logging.FileHandler):
                handler.setLevel(value)
