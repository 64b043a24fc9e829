"""Logging utilities for pricing runs."""
import logging
from datetime import datetime
from pathlib import Path
from typing import Optional

PACKAGE_LOGGER = "src"
_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def setup_logger(
    command: str,
    run_name: str,
    log_dir: Optional[str] = "logs",
    level: int = logging.INFO,
) -> logging.Logger:
    """Setup run logger with standardized formatting.

    Handlers sit on the package logger so engine and surrogate modules log to
    the same file. Calling again replaces the handlers installed before.
    """
    package = logging.getLogger(PACKAGE_LOGGER)
    package.setLevel(level)
    for handler in list(package.handlers):
        if getattr(handler, "_flmm_run", False):
            package.removeHandler(handler)
            handler.close()

    formatter = logging.Formatter(_FORMAT)

    # Console handler
    console_handler = logging.StreamHandler()
    console_handler.setLevel(level)
    console_handler.setFormatter(formatter)
    console_handler._flmm_run = True
    package.addHandler(console_handler)

    # File handler
    if log_dir is not None:
        timestamp = datetime.now().strftime("%Y-%m-%d-%H-%M-%S")
        log_path = Path(log_dir)
        log_path.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(log_path / f"{command}_{run_name}_{timestamp}.log")
        file_handler.setLevel(level)
        file_handler.setFormatter(formatter)
        file_handler._flmm_run = True
        package.addHandler(file_handler)

    return logging.getLogger(f"{PACKAGE_LOGGER}.runs.{command}_{run_name}")
