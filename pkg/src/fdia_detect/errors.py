"""Exception types shared across the pipeline."""


class FdiaError(Exception):
    """Base class for all package errors."""


class ConfigError(FdiaError, ValueError):
    """Invalid configuration or argument value."""


class DataError(FdiaError, ValueError):
    """Malformed or inconsistent input data."""


class ParseError(DataError):
    """CSV input that does not follow the telemetry schema."""

    def __init__(self, message, row=None, column=None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.row = row
        self.column = column


class CheckpointError(DataError):
    """Unreadable, truncated or incompatible checkpoint file."""


class NumericError(FdiaError, ArithmeticError):
    """Non-finite values appeared during a numeric computation."""


class KirchhoffWarning(UserWarning):
    """Ingested frame violates the power identities beyond tolerance."""
