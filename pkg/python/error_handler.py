"""
Error Handling for the gdbal toolkit
Provides typed errors, classification of foreign exceptions, stage tagging and
the mapping from error types to command exit codes
"""

import functools
import logging
import traceback
from enum import Enum
from typing import Any, Callable, Dict, List, Optional

import numpy as np

logger = logging.getLogger(__name__)


class ErrorType(Enum):
    """Types of errors that can occur in a job"""
    PARSE_ERROR = "parse_error"
    CONFIG_ERROR = "config_error"
    DIMENSION_ERROR = "dimension_error"
    PRECONDITION_ERROR = "precondition_error"
    INFEASIBLE = "infeasible"
    SOLVER_UNKNOWN = "solver_unknown"
    NUMERICAL_ERROR = "numerical_error"
    CONVERGENCE_ERROR = "convergence_error"
    VERIFICATION_FAILURE = "verification_failure"
    UNKNOWN_ERROR = "unknown_error"


class ErrorSeverity(Enum):
    """Severity levels for errors"""
    LOW = "low"           # reported, job continues
    MEDIUM = "medium"     # stage result unusable, later stages may continue
    HIGH = "high"         # job cannot produce its main artifact
    CRITICAL = "critical" # input itself is unusable


class RetryStrategy(Enum):
    """Retry steps applied to an inconclusive LMI solve, in order"""
    TIGHTEN_MARGIN = "tighten_margin"
    SWITCH_BACKEND = "switch_backend"
    NO_RETRY = "no_retry"


# Exit codes of the command line tool
EXIT_OK = 0
EXIT_VERIFICATION_FAILED = 1
EXIT_INFEASIBLE = 2
EXIT_CONFIG_ERROR = 3


class GdbalError(Exception):
    """Base exception carrying a type, a severity and the failing stage"""

    default_type = ErrorType.UNKNOWN_ERROR
    default_severity = ErrorSeverity.HIGH

    def __init__(self, message: str, error_type: Optional[ErrorType] = None,
                 severity: Optional[ErrorSeverity] = None, stage: Optional[str] = None,
                 context: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.error_type = error_type or self.default_type
        self.severity = severity or self.default_severity
        self.stage = stage
        self.context = context or {}
        self.traceback = traceback.format_exc()

    def with_stage(self, stage: str) -> "GdbalError":
        if self.stage is None:
            self.stage = stage
        return self


class ExpressionSyntaxError(GdbalError):
    """Malformed vector field text, with the position of the offending token"""

    default_type = ErrorType.PARSE_ERROR
    default_severity = ErrorSeverity.CRITICAL

    def __init__(self, message: str, line: int, column: int, **kwargs):
        super().__init__(f"{message} (line {line}, column {column})", **kwargs)
        self.line = line
        self.column = column
        self.context.update({"line": line, "column": column})


class ConfigError(GdbalError):
    default_type = ErrorType.CONFIG_ERROR
    default_severity = ErrorSeverity.CRITICAL


class DimensionError(GdbalError):
    default_type = ErrorType.DIMENSION_ERROR
    default_severity = ErrorSeverity.CRITICAL


class PreconditionError(GdbalError):
    default_type = ErrorType.PRECONDITION_ERROR
    default_severity = ErrorSeverity.HIGH


class ConvergenceError(GdbalError):
    default_type = ErrorType.CONVERGENCE_ERROR
    default_severity = ErrorSeverity.HIGH


class NumericalError(GdbalError):
    default_type = ErrorType.NUMERICAL_ERROR
    default_severity = ErrorSeverity.HIGH


class InfeasibleError(GdbalError):
    """An LMI stage ended infeasible or inconclusive; the solution is attached"""

    default_type = ErrorType.INFEASIBLE
    default_severity = ErrorSeverity.HIGH

    def __init__(self, message: str, solution: Any = None, **kwargs):
        super().__init__(message, **kwargs)
        self.solution = solution


class ErrorHandler:
    """Classifies errors, keeps an error log and renders report entries"""

    def __init__(self):
        self.error_log: List[Dict[str, Any]] = []
        self.error_patterns = {
            ErrorType.DIMENSION_ERROR: ["dimension", "shape", "mismatch", "not aligned"],
            ErrorType.NUMERICAL_ERROR: ["singular", "positive definite", "cholesky", "nan", "overflow"],
            ErrorType.CONVERGENCE_ERROR: ["converge", "iteration"],
            ErrorType.PRECONDITION_ERROR: ["requires", "must be", "precondition"],
            ErrorType.CONFIG_ERROR: ["config", "unknown key", "schema"],
        }
        self.exit_codes = {
            ErrorType.PARSE_ERROR: EXIT_CONFIG_ERROR,
            ErrorType.CONFIG_ERROR: EXIT_CONFIG_ERROR,
            ErrorType.DIMENSION_ERROR: EXIT_CONFIG_ERROR,
            ErrorType.INFEASIBLE: EXIT_INFEASIBLE,
            ErrorType.SOLVER_UNKNOWN: EXIT_INFEASIBLE,
            ErrorType.VERIFICATION_FAILURE: EXIT_VERIFICATION_FAILED,
        }

    def classify_error(self, error_message: str, exception: Optional[Exception] = None) -> ErrorType:
        """Classify a foreign exception by its type first, then by its message"""
        if isinstance(exception, GdbalError):
            return exception.error_type
        if isinstance(exception, np.linalg.LinAlgError):
            return ErrorType.NUMERICAL_ERROR
        if isinstance(exception, (FloatingPointError, OverflowError, ZeroDivisionError)):
            return ErrorType.NUMERICAL_ERROR

        error_lower = error_message.lower()
        for error_type, patterns in self.error_patterns.items():
            if any(pattern in error_lower for pattern in patterns):
                return error_type

        if isinstance(exception, (KeyError, TypeError)):
            return ErrorType.CONFIG_ERROR
        return ErrorType.UNKNOWN_ERROR

    def determine_severity(self, error_type: ErrorType) -> ErrorSeverity:
        severity_mapping = {
            ErrorType.PARSE_ERROR: ErrorSeverity.CRITICAL,
            ErrorType.CONFIG_ERROR: ErrorSeverity.CRITICAL,
            ErrorType.DIMENSION_ERROR: ErrorSeverity.CRITICAL,
            ErrorType.PRECONDITION_ERROR: ErrorSeverity.HIGH,
            ErrorType.INFEASIBLE: ErrorSeverity.HIGH,
            ErrorType.SOLVER_UNKNOWN: ErrorSeverity.HIGH,
            ErrorType.NUMERICAL_ERROR: ErrorSeverity.HIGH,
            ErrorType.CONVERGENCE_ERROR: ErrorSeverity.HIGH,
            ErrorType.VERIFICATION_FAILURE: ErrorSeverity.MEDIUM,
        }
        return severity_mapping.get(error_type, ErrorSeverity.HIGH)

    def wrap(self, exception: Exception, stage: Optional[str] = None) -> GdbalError:
        """Turn any exception into a GdbalError tagged with the stage"""
        if isinstance(exception, GdbalError):
            return exception.with_stage(stage) if stage else exception
        message = str(exception) or exception.__class__.__name__
        error_type = self.classify_error(message, exception)
        wrapped = GdbalError(message, error_type=error_type,
                             severity=self.determine_severity(error_type), stage=stage,
                             context={"exception": exception.__class__.__name__})
        wrapped.__cause__ = exception
        return wrapped

    def log_error(self, error: GdbalError, context: Optional[Dict[str, Any]] = None):
        """Record the error and log it at a level matching its severity"""
        entry = self.create_error_response(error)
        entry["context"] = {**entry["context"], **(context or {})}
        self.error_log.append(entry)

        log_message = f"❌ {error.error_type.value.upper()}"
        if error.stage:
            log_message += f" in {error.stage}"
        log_message += f": {error.message}"

        if error.severity == ErrorSeverity.CRITICAL:
            logger.critical(log_message)
        elif error.severity == ErrorSeverity.HIGH:
            logger.error(log_message)
        elif error.severity == ErrorSeverity.MEDIUM:
            logger.warning(log_message)
        else:
            logger.info(log_message)
        logger.debug(error.traceback)

    def create_error_response(self, error: GdbalError) -> Dict[str, Any]:
        """Standardized error entry for JSON reports (no timestamps, so reports stay reproducible)"""
        return {
            "error": error.message,
            "error_type": error.error_type.value,
            "severity": error.severity.value,
            "stage": error.stage,
            "context": {key: _jsonable(value) for key, value in error.context.items()},
            "exit_code": self.exit_code_for(error),
        }

    def exit_code_for(self, error: GdbalError) -> int:
        return self.exit_codes.get(error.error_type, EXIT_VERIFICATION_FAILED)

    def get_error_statistics(self) -> Dict[str, Any]:
        if not self.error_log:
            return {"total_errors": 0}

        error_types: Dict[str, int] = {}
        stages: Dict[str, int] = {}
        for entry in self.error_log:
            error_types[entry["error_type"]] = error_types.get(entry["error_type"], 0) + 1
            stage = entry["stage"] or "unknown"
            stages[stage] = stages.get(stage, 0) + 1

        return {
            "total_errors": len(self.error_log),
            "error_types": error_types,
            "stages": stages,
            "recent_errors": self.error_log[-10:],
        }

    def clear(self):
        self.error_log.clear()


def _jsonable(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, (str, int, float, bool)) or value is None:
        return value
    if isinstance(value, (list, tuple)):
        return [_jsonable(item) for item in value]
    if isinstance(value, dict):
        return {str(key): _jsonable(item) for key, item in value.items()}
    return str(value)


# Global error handler instance
error_handler = ErrorHandler()


def handle_stage_error(stage: str) -> Callable:
    """Decorator tagging every failure of a pipeline stage with the stage name"""
    def decorator(func: Callable) -> Callable:
        @functools.wraps(func)
        def wrapper(*args, **kwargs):
            try:
                return func(*args, **kwargs)
            except GdbalError as error:
                raise error.with_stage(stage)
            except Exception as error:
                raise error_handler.wrap(error, stage) from error
        return wrapper
    return decorator


__all__ = [
    'ErrorType', 'ErrorSeverity', 'RetryStrategy', 'GdbalError', 'ExpressionSyntaxError',
    'ConfigError', 'DimensionError', 'PreconditionError', 'ConvergenceError',
    'NumericalError', 'InfeasibleError', 'ErrorHandler', 'error_handler',
    'handle_stage_error', 'EXIT_OK', 'EXIT_VERIFICATION_FAILED', 'EXIT_INFEASIBLE',
    'EXIT_CONFIG_ERROR'
]
