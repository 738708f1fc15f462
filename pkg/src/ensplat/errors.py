"""Exception types shared across the package."""


class EnsplatError(Exception):
    """Base class for package errors."""


class ShapeError(EnsplatError, ValueError):
    """Operands have incompatible dimensions."""


class ContractError(EnsplatError, RuntimeError):
    """An API precondition was violated by the caller."""


class NumericError(EnsplatError, ArithmeticError):
    """A computation produced non-finite or degenerate values."""


class ConfigError(EnsplatError, ValueError):
    """Invalid configuration value or file."""
