import json
import sys
from typing import Any, Dict, Optional, TextIO

import structlog
from pydantic import ValidationError

from app.core.exceptions import CodecError, ConfigError

logger = structlog.get_logger(__name__)

INTERNAL_ERROR_EXIT = 70


def handle_exception(exc: BaseException, stream: Optional[TextIO] = None) -> int:
    """Report an exception on the diagnostic stream and return the process exit code."""
    stream = stream if stream is not None else sys.stderr

    if isinstance(exc, CodecError):
        return write_error(stream, type(exc).__name__, exc.message, exc.exit_code, exc.details)

    if isinstance(exc, ValidationError):
        return write_error(
            stream,
            ConfigError.__name__,
            "Validation error",
            ConfigError.exit_code,
            {"validation_errors": [e["msg"] for e in exc.errors()]},
        )

    if isinstance(exc, KeyboardInterrupt):
        return write_error(stream, "Interrupted", "Interrupted by user", 130)

    logger.error("unexpected_error", error=str(exc), exc_info=exc)
    message = str(exc) or "Internal error"
    return write_error(stream, type(exc).__name__, message, INTERNAL_ERROR_EXIT)


def write_error(
    stream: TextIO,
    kind: str,
    message: str,
    exit_code: int,
    details: Optional[Dict[str, Any]] = None,
) -> int:
    """``error[<ClassName>]: <message>`` followed by an optional details line."""
    stream.write(f"error[{kind}]: {message}\n")
    if details:
        stream.write(f"  details: {json.dumps(details, default=str, sort_keys=True)}\n")
    stream.flush()
    return exit_code
