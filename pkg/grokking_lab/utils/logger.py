import logging
import sys
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Optional

from tqdm import tqdm

from grokking_lab.core.config import settings

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
DATE_FORMAT = '%Y-%m-%d %H:%M:%S'


class TqdmHandler(logging.StreamHandler):
    """Console handler that prints above active progress bars (stderr)"""

    def emit(self, record: logging.LogRecord) -> None:
        try:
            tqdm.write(self.format(record), file=sys.stderr)
        except Exception:
            self.handleError(record)


def _default_level() -> int:
    if settings.LOG_LEVEL:
        return logging.getLevelName(settings.LOG_LEVEL.upper())
    return logging.DEBUG if settings.ENVIRONMENT == "development" else logging.INFO


def setup_logger(name: str, level: Optional[int] = None) -> logging.Logger:
    """Setup logger with a progress-bar-safe console handler and a rotating file handler"""
    logger = logging.getLogger(name)
    logger.setLevel(level if level is not None else _default_level())

    # Remove existing handlers
    logger.handlers = []

    console_handler = TqdmHandler()
    console_handler.setLevel(logging.DEBUG)

    # File handler
    log_dir = Path(settings.LOG_DIR)
    log_dir.mkdir(parents=True, exist_ok=True)
    file_handler = RotatingFileHandler(
        log_dir / settings.LOG_FILE,
        maxBytes=10 * 1024 * 1024,  # 10MB
        backupCount=5
    )
    file_handler.setLevel(logging.INFO)

    formatter = logging.Formatter(LOG_FORMAT, datefmt=DATE_FORMAT)
    for handler in (console_handler, file_handler):
        handler.setFormatter(formatter)
        logger.addHandler(handler)

    return logger
