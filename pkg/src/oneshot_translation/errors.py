"""Exception hierarchy shared across the package.

Each class maps to a CLI exit code so scripted callers can branch on
failure category without parsing stderr.
"""


class TranslationError(Exception):
    """Base class; exit code 1."""

    exit_code = 1


class ConfigError(TranslationError):
    """Bad or unknown configuration keys/values; exit code 2."""

    exit_code = 2


class DataError(TranslationError):
    """Missing or corrupt dataset/checkpoint files; exit code 3."""

    exit_code = 3


class NumericalError(TranslationError):
    """Non-finite loss or metric; exit code 4."""

    exit_code = 4


class AuditError(TranslationError):
    """Gradient-gate audit failure; exit code 5."""

    exit_code = 5
