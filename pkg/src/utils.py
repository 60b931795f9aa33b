"""Utility functions and helpers for photonstat."""

import hashlib
import logging
from pathlib import Path
from typing import Optional, Union

from .config import config
from .errors import ArgumentError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def format_float(value: float) -> str:
    """Full-precision rendering used in every exported report (17 significant digits)."""
    return f"{value:.17g}"


def format_display(value: float, digits: int = 4) -> str:
    """Rounded rendering for the human-readable column."""
    return f"{value:.{digits}f}"


def format_error(error: Exception, context: str = "") -> str:
    """Format error message for display."""
    error_type = type(error).__name__
    error_msg = str(error)

    if context:
        return f"Error in {context}: {error_type}: {error_msg}"
    else:
        return f"Error: {error_type}: {error_msg}"


def log_file_io(action: str, path: PathLike, detail: Optional[str] = None) -> None:
    """Log file reads and writes; verbose only in debug mode."""
    message = f"{action} {path}" + (f" ({detail})" if detail else "")
    if config.debug:
        logger.debug(message)
    else:
        logger.info(message)


def file_digest(path: PathLike, chunk_size: int = 1 << 20) -> str:
    """SHA-256 hex digest of a file."""
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for block in iter(lambda: handle.read(chunk_size), b""):
            digest.update(block)
    return digest.hexdigest()


def resolve_threads(requested: Optional[int] = None) -> int:
    """Worker count: explicit value first, then PHOTONSTAT_THREADS via config."""
    if requested is None:
        return config.threads
    if requested < 1:
        raise ArgumentError("thread count must be >= 1")
    return requested
