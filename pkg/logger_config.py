import logging
import logging.handlers
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, Optional

from config import settings

LOG_FORMAT = "%(asctime)s - %(processName)s - %(name)s - %(levelname)s - %(message)s"
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"
RUN_LOG_FILE = "train.log"


def _formatter() -> logging.Formatter:
    return logging.Formatter(fmt=LOG_FORMAT, datefmt=DATE_FORMAT)


def setup_logging(
    log_level: Optional[str] = None,
    log_file: Optional[str] = None,
    max_bytes: int = 10 * 1024 * 1024,  # 10MB
    backup_count: int = 5,
) -> None:
    """
    Configure the root logger for the CLI, grid workers and the results API.

    Args:
        log_level: Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL)
        log_file: Optional log file path, rotated at `max_bytes`
        max_bytes: Maximum log file size before rotation
        backup_count: Number of rotated files to keep
    """
    log_level = log_level or settings.log_level
    log_file = log_file or settings.log_file
    numeric_level = getattr(logging, log_level.upper(), logging.INFO)

    root_logger = logging.getLogger()
    root_logger.setLevel(numeric_level)
    for handler in root_logger.handlers[:]:
        root_logger.removeHandler(handler)

    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setLevel(numeric_level)
    console_handler.setFormatter(_formatter())
    root_logger.addHandler(console_handler)

    if log_file:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        file_handler = logging.handlers.RotatingFileHandler(
            filename=log_file,
            maxBytes=max_bytes,
            backupCount=backup_count,
            encoding="utf-8",
        )
        file_handler.setLevel(numeric_level)
        file_handler.setFormatter(_formatter())
        root_logger.addHandler(file_handler)
        logging.info(f"Logging to file: {log_file}")

    # torch and scipy report convergence and deprecation issues through warnings
    logging.captureWarnings(True)
    configure_third_party_loggers()
    logging.info(f"Logging configured with level: {log_level}")


def configure_third_party_loggers():
    """Quieten libraries that log heavily at DEBUG/INFO."""
    for name in ("matplotlib", "PIL", "torch", "urllib3", "httpx", "py.warnings"):
        logging.getLogger(name).setLevel(logging.WARNING)

    # Results API
    for name in ("uvicorn.access", "uvicorn.error", "fastapi"):
        logging.getLogger(name).setLevel(logging.INFO)


@contextmanager
def run_log(directory: Path, level: Optional[str] = None) -> Iterator[Path]:
    """
    Mirror every record emitted inside the block to <directory>/train.log.

    The file is appended to, so a resumed cell keeps the log of its earlier
    sessions.
    """
    path = Path(directory) / RUN_LOG_FILE
    path.parent.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(path, encoding="utf-8")
    handler.setLevel(getattr(logging, (level or settings.log_level).upper(), logging.INFO))
    handler.setFormatter(_formatter())
    root_logger = logging.getLogger()
    root_logger.addHandler(handler)
    try:
        yield path
    finally:
        root_logger.removeHandler(handler)
        handler.close()
