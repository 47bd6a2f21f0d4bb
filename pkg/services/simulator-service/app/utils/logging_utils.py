"""Logging setup and structured exception logging.

Simulation runs are batch jobs whose logs are often collected by a scheduler
that splits on newlines. Exceptions are therefore logged as a single JSON line.
"""

import json
import logging
import sys
import traceback
from typing import Any

from pythonjsonlogger.json import JsonFormatter


def setup_logging(level: str = "INFO", fmt: str = "text") -> None:
    """
    Configure root logging for the CLI.

    Args:
        level: Log level name (DEBUG, INFO, ...)
        fmt: "text" for human-readable lines, "json" for one JSON object per line
    """
    handler = logging.StreamHandler(sys.stderr)

    if fmt == "json":
        formatter: logging.Formatter = JsonFormatter(
            "%(asctime)s %(levelname)s %(name)s %(message)s"
        )
    else:
        formatter = logging.Formatter("%(asctime)s - %(name)s - %(levelname)s - %(message)s")
    handler.setFormatter(formatter)

    root_logger = logging.getLogger()
    root_logger.handlers.clear()
    root_logger.addHandler(handler)
    root_logger.setLevel(level.upper())

    # Set levels for noisy libraries
    logging.getLogger("matplotlib").setLevel(logging.WARNING)


def log_exception_json(
    logger: logging.Logger,
    message: str,
    exc: Exception,
    severity: str = "ERROR",
    **extra_fields: Any
) -> None:
    """
    Log an exception as a single structured JSON entry.

    Args:
        logger: Logger instance to use
        message: Human-readable error message
        exc: The exception to log
        severity: Log severity (ERROR, WARNING, etc.)
        **extra_fields: Additional context fields (module, config field, run id)

    Example:
        log_exception_json(
            logger,
            "Run failed",
            exc,
            module="workload",
            field="trace_path",
        )
    """
    stack_trace = "".join(traceback.format_exception(type(exc), exc, exc.__traceback__))

    log_entry = {
        "severity": severity,
        "message": f"{message}: {exc!s}",
        "stack_trace": stack_trace,
        "exception": {
            "type": type(exc).__name__,
            "message": str(exc),
        },
        **extra_fields
    }

    level = logging.WARNING if severity == "WARNING" else logging.ERROR
    logger.log(level, json.dumps(log_entry, default=str))


def format_exception_for_cli(exc: Exception) -> str:
    """
    Format exception for the one-line CLI error message.

    Returns a clean message without the stack trace.
    """
    module = getattr(exc, "module", None)
    field = getattr(exc, "field", None)
    prefix = f"[{module}] " if module else ""
    suffix = f" (config field: {field})" if field else ""
    return f"{prefix}{type(exc).__name__}: {exc!s}{suffix}"
