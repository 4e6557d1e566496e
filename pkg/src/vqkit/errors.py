"""Exception types shared across the package."""


class VqkitError(Exception):
    """Base class for all package errors."""


class ShapeError(VqkitError, ValueError):
    """An input violates a shape/dimension contract."""


class NonFiniteInputError(VqkitError, ValueError):
    """An input contains NaN or Inf where finite values are required."""


class InsufficientDataError(VqkitError, ValueError):
    """Too few samples for the requested operation (e.g. k-means with N < K)."""


class FormatError(VqkitError, ValueError):
    """A binary or text file does not conform to its declared format."""


class ConfigError(VqkitError, ValueError):
    """Invalid or unknown configuration key/value."""


class TrainingDiverged(VqkitError, RuntimeError):
    """Training produced a non-finite loss.

    Carries the diagnostic loss report and, when available, the path of the
    last checkpoint written before divergence.
    """

    def __init__(self, message, report=None, checkpoint_path=None):
        super().__init__(message)
        self.report = report
        self.checkpoint_path = checkpoint_path
