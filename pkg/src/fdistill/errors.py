"""Exception hierarchy shared across the package.

Public functions never raise bare ValueError/ArithmeticError for contract
violations; they raise one of these so callers (and the CLI exit-code
mapping) can tell user error, numeric failure, and file corruption apart.
"""


class FDistillError(Exception):
    """Base class for all package errors."""


class DomainError(FDistillError, ValueError):
    """An input is outside the mathematical domain of an operation."""


class ConfigError(FDistillError, ValueError):
    """A run configuration is malformed.

    `field` names the offending key so the CLI can print a field-level
    message.
    """

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"config field '{field}': {message}")


class NumericsError(FDistillError, FloatingPointError):
    """A computation produced non-finite or otherwise unusable values."""


class TrainingDiverged(NumericsError):
    """Training produced non-finite parameters; carries the step report."""

    def __init__(self, message: str, report=None):
        self.report = report
        super().__init__(message)


class CheckpointError(FDistillError):
    """A checkpoint file failed validation (magic, version, checksum, size)."""
