"""Exception types shared across the package."""


class DisclError(Exception):
    """Base class for all package errors."""


class ShapeError(DisclError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(DisclError, ValueError):
    """A configuration value is invalid or inconsistent."""


class InputError(DisclError, ValueError):
    """Input data violates an operation's precondition."""


class NumericError(DisclError, ArithmeticError):
    """NaN or infinite values where finite ones are required."""


class UsageError(DisclError, RuntimeError):
    """An API was called in an unsupported way."""
