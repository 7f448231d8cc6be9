"""Exception types shared across the package."""


class FgmError(Exception):
    """Base class for all package-specific errors."""


class DomainError(FgmError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class ShapeError(FgmError, ValueError):
    """Operands have incompatible or disallowed shapes."""


class NumericalError(FgmError, ArithmeticError):
    """A computation produced non-finite values; carries context when known."""

    def __init__(self, message, *, index=None, value=None):
        super().__init__(message)
        self.index = index
        self.value = value


class ConfigError(FgmError, ValueError):
    """A run configuration failed validation."""
