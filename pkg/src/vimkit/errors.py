"""Exception types shared across modules."""

from .tensor import IndexRangeError, NumericError, ShapeError


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class FormatError(ValueError):
    """A binary or text file does not match its declared format."""


class MagicError(FormatError):
    """File does not start with the expected magic bytes."""


class VersionError(FormatError):
    """File format version is not supported."""


class TruncatedError(FormatError):
    """File ended before the declared payload."""


class ChecksumError(FormatError):
    """Stored checksum does not match the file contents."""


class MaxvalError(FormatError):
    """Image declares an unsupported maximum sample value."""


class SamplingError(RuntimeError):
    """Sampling could not complete (e.g. the scorer failed)."""


__all__ = [
    "ChecksumError",
    "ConfigError",
    "FormatError",
    "IndexRangeError",
    "MagicError",
    "MaxvalError",
    "NumericError",
    "SamplingError",
    "ShapeError",
    "TruncatedError",
    "VersionError",
]
