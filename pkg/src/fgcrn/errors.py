"""Exception hierarchy shared across the package.

Each class maps to one CLI exit code so scripted callers can react to
failure categories without parsing messages.
"""


class FgcrnError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(FgcrnError):
    """Invalid configuration: bad keys, bad values, inconsistent setup."""

    exit_code = 2


class DataError(FgcrnError):
    """Invalid or insufficient data: shapes, labels, empty inputs."""

    exit_code = 3


class NumericError(FgcrnError):
    """Numeric failure: divergence, non-finite values, failed factorization."""

    exit_code = 4
