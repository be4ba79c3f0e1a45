"""
Error handling and logging utilities for the envshift pipeline.
"""

import logging
import sys
from functools import wraps
from typing import Optional, Dict, Any
from enum import Enum


class ErrorSeverity(str, Enum):
    """Error severity levels"""

    LOW = "low"
    MEDIUM = "medium"
    HIGH = "high"
    CRITICAL = "critical"


class EnvShiftError(Exception):
    """Base exception for envshift errors"""

    exit_code: int = 1

    def __init__(
        self,
        message: str,
        severity: ErrorSeverity = ErrorSeverity.MEDIUM,
        context: Optional[Dict[str, Any]] = None,
    ):
        self.message = message
        self.severity = severity
        self.context = context or {}
        super().__init__(self.message)


class ContractViolation(EnvShiftError):
    """A precondition of an operation does not hold (shapes, ranges)"""

    exit_code = 2


class ConfigError(EnvShiftError):
    """Invalid or unreadable run configuration"""

    exit_code = 2


class DataFileError(EnvShiftError):
    """A required input file is missing or malformed"""

    exit_code = 2

    def __init__(self, message: str, path: str, **kwargs):
        self.path = path
        super().__init__(message, **kwargs)
        self.context.setdefault("path", path)


class UnsupportedSizeError(EnvShiftError):
    """Problem size beyond what an exact routine supports"""

    exit_code = 2


class AssumptionError(EnvShiftError):
    """A generated system violates an identifiability assumption"""

    exit_code = 3

    def __init__(self, message: str, violated: list[str], **kwargs):
        self.violated = violated
        super().__init__(message, severity=ErrorSeverity.HIGH, **kwargs)
        self.context.setdefault("violated", violated)


class NumericError(EnvShiftError):
    """A computed quantity became non-finite"""

    exit_code = 4

    def __init__(self, message: str, term: str, **kwargs):
        self.term = term
        super().__init__(message, severity=ErrorSeverity.HIGH, **kwargs)
        self.context.setdefault("term", term)


def with_error_handling(severity: ErrorSeverity = ErrorSeverity.MEDIUM):
    """
    Decorator that logs failures of pipeline stages before re-raising.

    Usage:
        @with_error_handling(severity=ErrorSeverity.HIGH)
        def my_stage():
            ...
    """

    def decorator(func):
        @wraps(func)
        def wrapper(*args, **kwargs):
            log = logging.getLogger(func.__module__)
            try:
                return func(*args, **kwargs)

            except EnvShiftError as e:
                # Our own errors already carry context
                log.error(
                    f"Error in {func.__name__}: {e.message}",
                    extra={"severity": e.severity.value, "context": e.context},
                )
                raise

            except Exception as e:
                log.error(
                    f"Unexpected error in {func.__name__}: {e}",
                    extra={"severity": severity.value},
                    exc_info=True,
                )
                raise

        return wrapper

    return decorator


def safe_command(func):
    """
    Decorator for CLI commands: turns exceptions into process exit codes.

    0 success, 2 usage/config error, 3 assumption failure, 4 numeric failure.
    Unexpected exceptions are logged with traceback and exit with 1.
    """

    @wraps(func)
    def wrapper(*args, **kwargs):
        command = func.__name__
        log = logging.getLogger("envshift.cli")

        try:
            log.info(f"Starting command: {command}")
            func(*args, **kwargs)
            log.info(f"Completed command: {command}")
            code = 0

        except EnvShiftError as e:
            log.error(f"Command '{command}' failed: {e.message}")
            for key, value in e.context.items():
                log.error(f"  {key}: {str(value)[:200]}")
            code = e.exit_code

        except Exception as e:
            log.error(f"Command '{command}' failed: {e}", exc_info=True)
            code = 1

        sys.exit(code)

    return wrapper


def setup_logging(level: str = "INFO", quiet: bool = False):
    """Configure application logging"""
    logging.basicConfig(
        level=logging.WARNING if quiet else getattr(logging, level.upper(), logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
        force=True,
    )

    # Suppress noisy libraries
    logging.getLogger("torch").setLevel(logging.WARNING)
    logging.getLogger("urllib3").setLevel(logging.WARNING)
