"""Exception types shared across the package."""


class VeraError(Exception):
    """Base class for all package errors."""


class ConfigError(VeraError, ValueError):
    """Invalid configuration or parameter shapes."""


class DomainError(VeraError, ValueError):
    """Input outside the mathematical domain of an operation."""


class NumericalError(VeraError, ArithmeticError):
    """A loss or iterate became non-finite."""

    def __init__(self, message, breakdown=None):
        super().__init__(message)
        self.breakdown = breakdown or {}


class DataError(VeraError):
    """Malformed input data such as label maps or dataset indices."""
