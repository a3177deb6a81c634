"""Exception hierarchy shared across the package."""


class SmaatQmixError(Exception):
    """Base class for all package errors."""


class ShapeError(SmaatQmixError):
    """Tensor dimensions are incompatible with the requested operation."""


class ConfigError(SmaatQmixError):
    """A configuration value is invalid or inconsistent."""


class UsageError(SmaatQmixError):
    """An API was called outside its contract (e.g. backward on a non-scalar)."""


class FormatError(SmaatQmixError):
    """A serialized artifact (checkpoint, .rseq file) is malformed."""


class IoError(SmaatQmixError):
    """Reading or writing an artifact failed."""
