"""Exception types shared across the package."""


class SalmaskError(Exception):
    """Base class for package-specific failures."""


class FormatError(SalmaskError):
    """Malformed on-disk artifact (SMT1 blob, PPM image, CSV, ...)."""


class LoadError(SalmaskError):
    """Dataset ingestion failure; message names the offending file/row."""


class ConfigError(SalmaskError):
    """Invalid or inconsistent configuration."""


class ModeError(SalmaskError):
    """Operation invoked under a strategy or mode that does not support it."""


class StateError(SalmaskError):
    """Operation out of order: missing cache, mismatched shapes, stale handle."""


class NumericError(SalmaskError):
    """Non-finite values where finite arithmetic is required."""


class FrozenEncoderError(SalmaskError):
    """A frozen encoder's parameters changed when they must not."""
