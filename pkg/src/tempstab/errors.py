class ConfigError(ValueError):
    """Invalid configuration (ranges, network layout, loss settings)."""


class DimensionError(ValueError):
    """Array shapes are incompatible with the operation."""


class UsageError(RuntimeError):
    """API misuse, e.g. backward with a stale or foreign tape."""


class SingularTransformError(ValueError):
    """A shear angle makes the index transformation undefined."""


class SequenceLengthError(ValueError):
    """Video too short for the temporal filter support."""
