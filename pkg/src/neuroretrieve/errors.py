"""Shared exception types.

The command line maps these onto stable exit codes: configuration problems
exit with 2, file and format problems with 3, numeric failures with 4.
"""


class ConfigError(ValueError):
    """Invalid configuration value or inconsistent run setup."""


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class FormatError(ValueError):
    """A serialized artifact is malformed, truncated, or mislabeled."""


class NumericsError(ArithmeticError):
    """A computation produced NaN or Inf, or hit a degenerate value."""
