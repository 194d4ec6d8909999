"""Exception hierarchy shared across the package.

Each class maps to one CLI exit code (see cli.py): configuration
problems exit 2, data problems exit 3, numerical failures exit 4.
"""


class McclError(Exception):
    """Base class for all package errors."""


class ConfigError(McclError):
    """Invalid configuration: bad key, bad value, unsatisfiable setting."""

    exit_code = 2


class DataError(McclError):
    """Malformed or inconsistent dataset / checkpoint / embedding file."""

    exit_code = 3


class NumericalError(McclError):
    """Non-finite values encountered during training or evaluation."""

    exit_code = 4
