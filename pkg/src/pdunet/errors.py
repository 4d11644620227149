"""Exception taxonomy shared across the package."""


class PdunetError(Exception):
    """Base class for all package errors."""


class ShapeError(PdunetError, ValueError):
    """Tensor extents are inconsistent with the requested operation."""


class LabelError(PdunetError, ValueError):
    """A class label is outside the supported range."""


class ConfigError(PdunetError, ValueError):
    """A configuration value is invalid or geometrically infeasible."""


class DomainError(PdunetError, ValueError):
    """A scalar argument is outside the function's domain."""


class DegenerateBatchError(PdunetError, ValueError):
    """Batch statistics are undefined (single-element normalization set)."""


class UnsupportedConfigurationError(PdunetError, ValueError):
    """The analysis is not defined for this configuration."""


class TrainingFault(PdunetError, RuntimeError):
    """Training produced a non-finite quantity and cannot continue."""
