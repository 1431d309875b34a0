"""Exception types raised across the package."""


class ContriMixError(Exception):
    """Base class for all package errors."""


class ShapeError(ContriMixError, ValueError):
    pass


class DomainError(ContriMixError, ValueError):
    """A value lies outside the domain of an operation (log of <= 0, division by 0)."""


class ConfigError(ContriMixError, ValueError):
    pass


class UsageError(ContriMixError, ValueError):
    """An API was called in a way its contract forbids."""


class StrategyError(ContriMixError, ValueError):
    pass


class SingularMatrixError(ContriMixError, ValueError):
    pass


class NonFiniteError(ContriMixError, FloatingPointError):
    pass
