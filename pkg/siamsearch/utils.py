"""
Utility functions for siamsearch.
"""

import logging
import time
from collections.abc import Iterator
from contextlib import contextmanager


def format_duration(seconds: float) -> str:
    """Format a duration in seconds to a human-readable string."""
    if seconds < 60:
        return f"{int(seconds)}s"
    elif seconds < 3600:
        minutes = int(seconds / 60)
        secs = int(seconds % 60)
        return f"{minutes}m {secs}s"
    else:
        hours = int(seconds / 3600)
        minutes = int((seconds % 3600) / 60)
        return f"{hours}h {minutes}m"


@contextmanager
def timed(logger: logging.Logger, what: str) -> Iterator[None]:
    """Log how long the enclosed block took."""
    start = time.perf_counter()
    try:
        yield
    finally:
        logger.info("%s finished in %s", what, format_duration(time.perf_counter() - start))


def format_percent(value: float | None) -> str:
    return "-" if value is None else f"{value:.1f}%"
