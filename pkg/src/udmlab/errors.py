"""Exception hierarchy shared by every udmlab module."""


class UDMError(Exception):
    """Base class for all library errors."""


class DomainError(UDMError, ValueError):
    """An argument lies outside its mathematical domain."""


class ShapeError(UDMError, ValueError):
    """Array shapes or architecture descriptors disagree."""


class NumericError(UDMError, ArithmeticError):
    """A non-finite value appeared during a computation.

    ``index`` names the offending batch item when it is known.
    """

    def __init__(self, message: str, index: int | None = None):
        if index is not None:
            message = f"{message} (batch index {index})"
        super().__init__(message)
        self.index = index


class ConfigError(UDMError, ValueError):
    """A configuration value or key is invalid."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


class StatisticsError(UDMError, ValueError):
    """Too few samples to estimate a statistic."""


class CheckpointMismatch(UDMError):
    """A checkpoint does not match the requested architecture or format."""
