"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid network or run configuration (shapes, divisibility, unknown keys)."""


class DataFormatError(ValueError):
    """A dataset file does not match its binary format."""


class DivergenceError(ArithmeticError):
    """A loss or gradient became non-finite during training."""
