"""Exception hierarchy and error formatting for the ECG-NAT toolkit."""

from enum import Enum
from typing import Any, Dict, List, Optional, Sequence
import logging

logger = logging.getLogger(__name__)


class ErrorCategory(Enum):
    """Categories of errors."""
    VALIDATION = "validation"
    CONFIGURATION = "configuration"
    CONTRACT = "contract"
    DATA_LOADING = "data_loading"
    CHECKPOINT = "checkpoint"
    ML_TRAINING = "ml_training"
    ML_EVALUATION = "ml_evaluation"
    VERIFICATION = "verification"


class EcgNatException(Exception):
    """Base exception for the ECG-NAT toolkit."""
    category = ErrorCategory.CONTRACT

    def __init__(self, message: str, details: Optional[str] = None):
        self.message = message
        self.details = details
        super().__init__(self.message)


class ValidationError(EcgNatException):
    """Raised when a run configuration fails validation.

    All problems are collected before raising so a user can fix them in one go.
    """
    category = ErrorCategory.VALIDATION

    def __init__(self, message: str, errors: Optional[Sequence[str]] = None,
                 details: Optional[str] = None):
        self.errors: List[str] = list(errors or [])
        if details is None and self.errors:
            details = "\n".join(f"- {e}" for e in self.errors)
        super().__init__(message, details)


class ConfigurationError(EcgNatException):
    """Raised for semantically invalid settings."""
    category = ErrorCategory.CONFIGURATION


class ContractError(EcgNatException):
    """Raised when a documented precondition is violated."""
    category = ErrorCategory.CONTRACT


class DimensionError(ContractError):
    """Raised on shape mismatch; `axes` names the offending axes."""

    def __init__(self, message: str, axes: Optional[Dict[str, Any]] = None,
                 details: Optional[str] = None):
        self.axes = dict(axes or {})
        if details is None and self.axes:
            details = ", ".join(f"{k}={v}" for k, v in self.axes.items())
        super().__init__(message, details)


class NeighborhoodIndexError(ContractError, IndexError):
    """Raised when a query position lies outside the sequence."""


class DataLoadingError(EcgNatException):
    """Exception raised for record, sidecar or manifest IO failures."""
    category = ErrorCategory.DATA_LOADING

    def __init__(self, message: str, details: Optional[str] = None,
                 file_path: Optional[str] = None):
        self.file_path = file_path
        super().__init__(message, details)


class CheckpointError(EcgNatException):
    """Exception raised for unreadable or incompatible checkpoints."""
    category = ErrorCategory.CHECKPOINT

    def __init__(self, message: str, details: Optional[str] = None,
                 file_path: Optional[str] = None):
        self.file_path = file_path
        super().__init__(message, details)


class MLTrainingError(EcgNatException):
    """Exception raised for training failures."""
    category = ErrorCategory.ML_TRAINING

    def __init__(self, message: str, details: Optional[str] = None,
                 model_state: Optional[Dict] = None):
        self.model_state = model_state
        super().__init__(message, details)


class MLEvaluationError(EcgNatException):
    """Exception raised when a metric is undefined for the given data."""
    category = ErrorCategory.ML_EVALUATION

    def __init__(self, message: str, details: Optional[str] = None,
                 metrics: Optional[Dict] = None):
        self.metrics = metrics
        super().__init__(message, details)


class VerificationError(EcgNatException):
    """Exception raised when one or more verification suites fail."""
    category = ErrorCategory.VERIFICATION

    def __init__(self, message: str, details: Optional[str] = None,
                 report: Optional[Any] = None):
        self.report = report
        super().__init__(message, details)


EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2
EXIT_VERIFICATION = 3


def exit_code_for(exc: BaseException) -> int:
    """Map an exception to the process exit code."""
    if isinstance(exc, (ValidationError, ConfigurationError)):
        return EXIT_VALIDATION
    if isinstance(exc, VerificationError):
        return EXIT_VERIFICATION
    return EXIT_RUNTIME


def format_error(exc: BaseException) -> str:
    """Render an exception with its details for logs and the console."""
    if isinstance(exc, MLTrainingError) and exc.model_state:
        head = f"Training Error: {exc.message}"
        extra = f"model_state: {exc.model_state}"
    elif isinstance(exc, MLEvaluationError) and exc.metrics:
        head = f"Evaluation Error: {exc.message}"
        extra = f"metrics: {exc.metrics}"
    elif isinstance(exc, (DataLoadingError, CheckpointError)) and exc.file_path:
        head = f"{type(exc).__name__}: {exc.message}"
        extra = f"path: {exc.file_path}"
    elif isinstance(exc, EcgNatException):
        head = f"{type(exc).__name__}: {exc.message}"
        extra = None
    else:
        return f"{type(exc).__name__}: {exc}"
    parts = [head]
    if extra:
        parts.append(extra)
    if exc.details:
        parts.append(exc.details)
    return "\n".join(parts)


def handle_error(exc: BaseException) -> int:
    """Log an exception at the right severity and return its exit code."""
    code = exit_code_for(exc)
    if code == EXIT_VALIDATION:
        logger.error(format_error(exc))
    else:
        logger.error(format_error(exc), exc_info=not isinstance(exc, EcgNatException))
    return code
