"""Exception types shared across the package."""


class FTWTError(Exception):
    """Base class for errors raised by this package."""


class ConfigurationError(FTWTError, ValueError):
    """Shapes, architectures or settings that cannot work together."""


class NonFiniteError(FTWTError, FloatingPointError):
    """A NaN or Inf appeared in a tensor."""


class FormatError(FTWTError, ValueError):
    """A checkpoint, dataset or report file does not match its format."""


class DataError(FormatError):
    """Dataset files that are missing, malformed or inconsistent."""


class BenchmarkError(FTWTError, RuntimeError):
    """The latency benchmark's preconditions could not be met."""
