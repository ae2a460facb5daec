"""Exception hierarchy shared across the package.

The CLI maps each family to its own exit code, so modules raise the most
specific class that applies.
"""


class D2pccaError(Exception):
    """Base class for all package errors."""


class ConfigError(D2pccaError):
    pass


class DataError(D2pccaError):
    pass


class NumericalError(D2pccaError, ArithmeticError):
    pass


class ShapeError(D2pccaError, ValueError):
    pass


class DomainError(NumericalError, ValueError):
    pass


class CheckpointError(D2pccaError):
    pass
