"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: InputError (and subclasses) -> 1,
NumericalError -> 2.
"""


class SlvError(Exception):
    """Base class for all package errors."""


class InputError(SlvError, ValueError):
    """Invalid argument, malformed file, or violated precondition."""


class ConfigError(InputError):
    """Inconsistent or out-of-range configuration values."""


class DatasetFormatError(InputError):
    """Malformed dataset / label / detection file; message carries file:line."""


class NumericalError(SlvError, ArithmeticError):
    """Non-finite values or other numerical breakdown during computation."""
