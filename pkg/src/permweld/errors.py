"""Exception types shared across the package.

The hierarchy maps onto the CLI exit codes: configuration and argument
problems (exit 2), data and file-format problems (exit 3), and numeric
failures such as divergence (exit 4).
"""


class PermweldError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(PermweldError, ValueError):
    """An argument violates a documented precondition (shape, range, label set)."""


class ConfigError(PermweldError, ValueError):
    """An experiment configuration document is malformed or inconsistent."""


class FormatError(PermweldError, ValueError):
    """A binary file has the wrong magic, version, or internal structure."""


class DataIOError(PermweldError, OSError):
    """A data file is truncated or could not be read/written completely."""


class NumericError(PermweldError, ArithmeticError):
    """A computation produced non-finite values (divergence, overflow)."""
