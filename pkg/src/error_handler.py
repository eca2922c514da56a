"""
Error handling for the SLADE training pipeline.

This module defines the exception hierarchy raised by the numerical and I/O
layers, and turns any raised exception into a structured, user-facing report
with a category, an exit code and actionable suggestions.
"""
from enum import Enum
from typing import Optional, List
from dataclasses import dataclass, field


class ErrorCategory(Enum):
    """Categories of pipeline errors."""
    VALIDATION = "validation"            # Precondition on inputs violated
    SHAPE_MISMATCH = "shape_mismatch"    # Incompatible vector/matrix shapes
    DEGENERATE = "degenerate"            # Zero vector / dead embedding
    FORMAT = "format"                    # Malformed text container
    CONFIG = "config"                    # Bad config file or value
    NOT_SEPARATED = "not_separated"      # mu+ <= mu-, mining impossible
    INFEASIBLE = "infeasible"            # Synthetic generator gave up
    IO = "io"                            # Filesystem failure
    CRASH = "crash"                      # Unexpected exception
    UNKNOWN = "unknown"


# Exit-code contract of the command line surface
EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2

_VALIDATION_CATEGORIES = {
    ErrorCategory.VALIDATION,
    ErrorCategory.CONFIG,
    ErrorCategory.FORMAT,
    ErrorCategory.SHAPE_MISMATCH,
}


class SladeError(Exception):
    """Base class of every error raised by this package."""
    category = ErrorCategory.UNKNOWN

    def __init__(self, message: str, details: Optional[str] = None):
        super().__init__(message)
        self.message = message
        self.details = details


class ValidationError(SladeError):
    category = ErrorCategory.VALIDATION


class ShapeMismatchError(SladeError):
    category = ErrorCategory.SHAPE_MISMATCH


class DegenerateDirectionError(SladeError):
    category = ErrorCategory.DEGENERATE

    def __init__(self, message: str = "degenerate direction", details: Optional[str] = None):
        super().__init__(message, details)


class DeadEmbeddingError(DegenerateDirectionError):
    def __init__(self, message: str = "dead embedding", details: Optional[str] = None):
        super().__init__(message, details)


class FormatError(SladeError):
    """Malformed text container; carries the offending line number if known."""
    category = ErrorCategory.FORMAT

    def __init__(self, message: str, line: Optional[int] = None,
                 path: Optional[str] = None):
        where = ""
        if path is not None:
            where = f"{path}"
        if line is not None:
            where = f"{where}:{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)
        self.line = line
        self.path = path


class ConfigError(SladeError):
    category = ErrorCategory.CONFIG

    def __init__(self, message: str, line: Optional[int] = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class NotSeparatedError(SladeError):
    category = ErrorCategory.NOT_SEPARATED

    def __init__(self, message: str = "distributions not separated",
                 details: Optional[str] = None):
        super().__init__(message, details)


class SeparationInfeasibleError(SladeError):
    category = ErrorCategory.INFEASIBLE

    def __init__(self, message: str = "separation infeasible at this dim",
                 details: Optional[str] = None):
        super().__init__(message, details)


@dataclass
class ErrorReport:
    """
    Structured representation of a pipeline failure.

    Attributes:
        category: Error category
        exit_code: Exit code the command line surface returns
        message: Raw exception message
        user_message: Short user-friendly message
        suggestions: List of suggested fixes
        technical_details: Extra context for advanced users
    """
    category: ErrorCategory
    exit_code: int
    message: str
    user_message: str
    suggestions: List[str] = field(default_factory=list)
    technical_details: Optional[str] = None


class ErrorParser:
    """
    Maps exceptions to categorized error reports.

    Package exceptions carry their own category; anything else is treated
    as a crash, except for filesystem errors which become IO failures.
    """

    USER_MESSAGES = {
        ErrorCategory.VALIDATION: "Input validation failed",
        ErrorCategory.SHAPE_MISMATCH: "Array shapes are incompatible",
        ErrorCategory.DEGENERATE: "A zero vector reached a normalization step",
        ErrorCategory.FORMAT: "Failed to parse input file",
        ErrorCategory.CONFIG: "Configuration error",
        ErrorCategory.NOT_SEPARATED: "Similarity distributions are not separated",
        ErrorCategory.INFEASIBLE: "Synthetic benchmark cannot be generated",
        ErrorCategory.IO: "File system error",
    }

    SUGGESTIONS = {
        ErrorCategory.VALIDATION: [
            "Check dataset class counts and sizes against the config",
            "Run with --log-level DEBUG for the failing check",
        ],
        ErrorCategory.SHAPE_MISMATCH: [
            "Verify the feature dimension of every dataset matches the checkpoint",
            "Check layer_dims in the parameter file",
        ],
        ErrorCategory.DEGENERATE: [
            "The embedding network may have collapsed; lower the learning rate",
            "Try a different seed",
        ],
        ErrorCategory.FORMAT: [
            "Verify the file header and version line",
            "Regenerate the file with the gen-data or train commands",
        ],
        ErrorCategory.CONFIG: [
            "Check the spelling of every key in the config file",
            "Values must be plain numbers or one of the documented choices",
        ],
        ErrorCategory.NOT_SEPARATED: [
            "Increase basis_warmup_iters",
            "Check that the teacher was trained before pseudo labeling",
        ],
        ErrorCategory.INFEASIBLE: [
            "Lower center_separation or raise the feature dimension",
            "Reduce the number of classes",
        ],
        ErrorCategory.IO: [
            "Check that the path exists and is writable",
            "Ensure sufficient disk space is available",
        ],
    }

    @classmethod
    def parse_error(cls, exception: BaseException) -> ErrorReport:
        """
        Create a structured report for an exception.

        Args:
            exception: The exception that aborted the command

        Returns:
            ErrorReport with category, exit code and suggestions
        """
        if isinstance(exception, SladeError):
            category = exception.category
            details = exception.details
        elif isinstance(exception, (FileNotFoundError, PermissionError, IsADirectoryError)):
            category = ErrorCategory.IO
            details = f"{type(exception).__name__}: {exception}"
        else:
            return ErrorReport(
                category=ErrorCategory.CRASH,
                exit_code=EXIT_RUNTIME,
                message=str(exception),
                user_message=f"Unexpected error: {type(exception).__name__}",
                suggestions=[
                    "This may be a bug in the pipeline",
                    "Re-run with --log-level DEBUG and report the log",
                ],
                technical_details=f"{type(exception).__name__}: {exception}",
            )

        return ErrorReport(
            category=category,
            exit_code=exit_code_for(category),
            message=str(exception),
            user_message=cls.USER_MESSAGES.get(category, str(exception)),
            suggestions=cls.SUGGESTIONS.get(category, ["Check the log for details"]),
            technical_details=details,
        )


def exit_code_for(category: ErrorCategory) -> int:
    """Exit code for an error category: 1 for bad input, 2 for runtime failure."""
    return EXIT_VALIDATION if category in _VALIDATION_CATEGORIES else EXIT_RUNTIME


def format_error_for_display(error: ErrorReport, include_technical: bool = True) -> str:
    """
    Format an error report for the terminal.

    Args:
        error: ErrorReport object
        include_technical: Whether to include technical details

    Returns:
        Formatted error message
    """
    lines = []

    lines.append("═" * 60)
    lines.append("PIPELINE ERROR")
    lines.append("═" * 60)
    lines.append("")

    lines.append(f"Error: {error.user_message}")
    lines.append(f"  {error.message}")
    lines.append("")
    lines.append(f"Exit Code: {error.exit_code}")
    lines.append("")

    if error.suggestions:
        lines.append("Suggestions:")
        for suggestion in error.suggestions:
            lines.append(f"  • {suggestion}")
        lines.append("")

    if include_technical and error.technical_details:
        lines.append("Technical Details:")
        lines.append("-" * 60)
        lines.append(error.technical_details)
        lines.append("-" * 60)

    return "\n".join(lines)
