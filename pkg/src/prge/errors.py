"""Exception types shared across the package."""

from .tensor.core import DimensionError


class ConfigError(ValueError):
    """Invalid configuration or hyperparameter combination."""


class NumericError(ArithmeticError):
    """A loss or update became non-finite."""


class DataError(ValueError):
    """Dataset content violates a model or batching limit."""


__all__ = ["ConfigError", "DataError", "DimensionError", "NumericError"]
