"""Exception hierarchy shared by all afine modules.

Each class maps to one CLI exit code (see :mod:`afine.cli`).
"""


class AfineError(Exception):
    exit_code = 1


class UsageError(AfineError):
    exit_code = 1


class ConfigError(AfineError):
    exit_code = 1


class DimensionError(AfineError, ValueError):
    exit_code = 2


class DataError(AfineError):
    exit_code = 2


class ParameterError(AfineError, ValueError):
    exit_code = 2


class NumericError(AfineError, FloatingPointError):
    """Raised when training hits a non-finite loss."""

    exit_code = 3
