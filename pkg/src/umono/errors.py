"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand extents are incompatible with an operation."""


class NumericalError(FloatingPointError):
    """A NaN or Inf appeared where only finite values are allowed."""


class GraphError(RuntimeError):
    """Misuse of the autodiff tape (double backward, detached loss, ...)."""


class FormatError(ValueError):
    """A file on disk does not follow the expected binary/text layout."""


class ConfigError(ValueError):
    """Invalid run configuration."""
