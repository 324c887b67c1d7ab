"""Exception types shared across the package.

Each carries the CLI exit code it maps to.
"""


class LatentMotionError(Exception):
    exit_code = 1


class ConfigError(LatentMotionError, ValueError):
    """Invalid configuration or arguments (dimension mismatch, bad field)."""

    exit_code = 2


class NumericError(LatentMotionError, ArithmeticError):
    """Non-finite values encountered in a loss, gradient or metric."""

    exit_code = 3


class FormatError(LatentMotionError, IOError):
    """An on-disk artifact is missing, truncated or of an unknown version."""

    exit_code = 4
