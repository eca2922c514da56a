"""
Logging configuration for the command line surface.
"""
import logging
import os
from typing import Optional

LOG_FORMAT = '[%(levelname)1.1s %(asctime)s %(funcName)s:%(lineno)d] %(message)s'
DATE_FORMAT = '%Y%m%d %H:%M:%S'


def configure_logging(level: str = "INFO", log_file: Optional[str] = None) -> logging.Logger:
    """
    Install a stream handler (and optionally a file handler) on the package logger.

    Args:
        level: Logging level name
        log_file: Optional path mirroring the log to disk

    Returns:
        The configured package logger
    """
    logger = logging.getLogger("src")
    logger.setLevel(getattr(logging, level.upper(), logging.INFO))
    formatter = logging.Formatter(LOG_FORMAT, datefmt=DATE_FORMAT)

    for handler in list(logger.handlers):
        logger.removeHandler(handler)

    ch = logging.StreamHandler()
    ch.setFormatter(formatter)
    logger.addHandler(ch)

    if log_file:
        log_dir = os.path.dirname(log_file)
        if log_dir and not os.path.exists(log_dir):
            os.makedirs(log_dir)
        fh = logging.FileHandler(log_file)
        fh.setFormatter(formatter)
        logger.addHandler(fh)

    logger.propagate = False
    return logger
