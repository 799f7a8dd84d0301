"""Exception hierarchy shared across the package."""


class NowcastError(Exception):
    """Base class for all package errors."""


class FormatError(NowcastError):
    """Bad magic, version or header in a binary file."""


class LengthError(NowcastError):
    """Payload shorter or longer than the header promises."""


class DataError(NowcastError):
    """Invalid values (negative, NaN, infinite) or data-contract violations."""


class DimensionError(NowcastError):
    """Shape mismatch between operands."""


class ConfigError(NowcastError):
    """Invalid configuration value."""


class IntegrityError(NowcastError):
    """A forward cache was consumed more than once."""


class NumericError(NowcastError):
    """Non-finite loss or gradient, or a singular linear system."""
