"""Structured logging configuration."""

import logging
import sys
from typing import Any

import numpy as np
import structlog
from structlog.typing import FilteringBoundLogger

from mcf_fusion.core.config import get_settings


def setup_logging(level: str | None = None) -> None:
    """Configure structured logging.

    Logs go to stderr; command results on stdout stay byte-deterministic.
    """
    settings = get_settings()
    level_name = (level or settings.LOG_LEVEL).upper()

    structlog.configure(
        processors=[
            structlog.contextvars.merge_contextvars,
            structlog.processors.add_log_level,
            structlog.processors.StackInfoRenderer(),
            structlog.dev.set_exc_info,
            structlog.processors.TimeStamper(fmt="ISO"),
            structlog.processors.JSONRenderer() if settings.LOG_FORMAT == "json"
            else structlog.dev.ConsoleRenderer(),
        ],
        wrapper_class=structlog.make_filtering_bound_logger(
            getattr(logging, level_name)
        ),
        context_class=dict,
        logger_factory=structlog.PrintLoggerFactory(file=sys.stderr),
        cache_logger_on_first_use=settings.LOG_CACHE,
    )

    logging.basicConfig(
        format="%(message)s",
        stream=sys.stderr,
        level=getattr(logging, level_name),
    )


def get_logger(name: str = "") -> FilteringBoundLogger:
    """Get a structured logger instance."""
    return structlog.get_logger(name)


def loggable(data: dict[str, Any]) -> dict[str, Any]:
    """Replace arrays in a log payload with compact shape descriptors."""
    compact = {}
    for key, value in data.items():
        array = getattr(value, "data", value)
        if isinstance(array, np.ndarray) and array.ndim > 0:
            shape = "x".join(str(d) for d in array.shape)
            compact[key] = f"<array {shape} {array.dtype}>"
        else:
            compact[key] = value
    return compact
