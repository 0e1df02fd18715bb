import csv
import logging
import sys

from datetime import datetime
from pathlib import Path
from typing import Iterable, Sequence


def setup_logger(debug: bool = False, logs_dir: str = "logs") -> logging.Logger:
    """Configure logging with both file and console handlers.

    Package loggers created before this call drop their own handlers and
    propagate here, so solver progress reaches the same file and console.
    """
    level = logging.DEBUG if debug else logging.INFO
    logger = logging.getLogger("ttcme")
    logger.setLevel(level)
    logger.propagate = False

    if not logger.handlers:
        # Create logs directory if it doesn't exist
        path = Path(logs_dir)
        path.mkdir(exist_ok=True)

        # File handler with timestamp in filename
        timestamp = datetime.now().strftime("%Y%m%d_%H%M%S")
        file_handler = logging.FileHandler(path / f"ttcme_{timestamp}.log", encoding="utf-8")
        file_handler.setFormatter(
            logging.Formatter("%(asctime)s - %(name)s - %(levelname)s - %(message)s")
        )
        logger.addHandler(file_handler)

        # Console handler
        console_handler = logging.StreamHandler(sys.stdout)
        console_handler.setFormatter(logging.Formatter("%(message)s"))
        logger.addHandler(console_handler)

    for name, child in logging.root.manager.loggerDict.items():
        if name.startswith("ttcme.") and isinstance(child, logging.Logger):
            child.handlers.clear()
            child.setLevel(level)
            child.propagate = True

    return logger


def format_value(value) -> str:
    """Floats with 17 significant digits; everything else as is."""
    if isinstance(value, float):
        return format(value, ".17g")
    if hasattr(value, "dtype") and value.dtype.kind == "f":
        return format(float(value), ".17g")
    return str(value)


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    """Write a CSV with a header row, creating parent directories."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_value(v) for v in row])
    return path
