"""Exception types shared across the package."""


class VoxgateError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(VoxgateError, ValueError):
    """Tensor or volume extents violate an operation's contract."""


class ConfigurationError(VoxgateError, ValueError):
    """A configuration record is invalid or internally inconsistent."""


class FormatError(VoxgateError, ValueError):
    """An on-disk artifact (volume, checkpoint, manifest) is malformed."""


class MetricUndefinedError(VoxgateError, ValueError):
    """A metric has no defined value for the given inputs (e.g. empty mask)."""


class NumericalError(VoxgateError, RuntimeError):
    """A non-finite value appeared where finite numbers are required."""


class TrainingDiverged(NumericalError):
    """Training loss became non-finite; parameters were restored to the
    last state that produced a finite loss."""
