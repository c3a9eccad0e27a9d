"""Exception types shared across the package."""


class LabelFieldError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(LabelFieldError, ValueError):
    """Inconsistent configuration: shape mismatches, bad widths, unknown names."""


class NumericError(LabelFieldError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class ParseError(LabelFieldError, ValueError):
    """Malformed file content (bad magic, truncated payload, invalid header)."""
