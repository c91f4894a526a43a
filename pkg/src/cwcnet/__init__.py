"""Layer-local CNN training with channel-wise competitive goodness losses."""

from .errors import ConfigError, DataFormatError, DivergenceError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataFormatError", "DivergenceError", "__version__"]
