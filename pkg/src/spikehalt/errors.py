"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Raised when tensor shapes do not line up for an operation."""


class SequencingError(RuntimeError):
    """Raised when halting updates are applied out of scan order."""


class ConfigError(ValueError):
    """Invalid model, training or experiment configuration."""


class DataFormatError(ValueError):
    """Malformed dataset file or record."""


class NumericError(ArithmeticError):
    """Non-finite loss or gradients during training."""
