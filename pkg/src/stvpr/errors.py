"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Shapes of operands do not agree."""


class InputError(ValueError):
    """An argument is empty or otherwise unusable."""


class ConfigError(ValueError):
    """A configuration key or value is invalid."""


class NumericError(ArithmeticError):
    """A NaN or infinity showed up where finite values are required."""
