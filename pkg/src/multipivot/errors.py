"""Exception types shared across the package."""


class MultipivotError(Exception):
    """Base class for user-facing errors (CLI exit code 1)."""


class ContractError(MultipivotError, ValueError):
    """A documented precondition of an operation was violated."""


class ConfigurationError(MultipivotError):
    """Inconsistent model, pipeline or experiment configuration."""


class LengthError(ContractError):
    """Input sequence longer than the model's ``max_len``."""


class SpecError(ConfigurationError):
    """Invalid synthetic corpus specification."""


class ParseError(MultipivotError):
    """Malformed input file."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class TrainingError(MultipivotError):
    """Training aborted (non-finite loss)."""
