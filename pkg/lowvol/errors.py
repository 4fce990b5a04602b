# lowvol/errors.py
"""
Exception types shared by every lowvol module.

The CLI maps DataError / DomainError to exit code 1 and ConfigError to
exit code 2.
"""


class LowVolError(Exception):
    """Base class for all lowvol errors."""


class DataError(LowVolError, ValueError):
    """Malformed or inconsistent input data (messages name file and line)."""


class DomainError(LowVolError, ValueError):
    """An operation was called outside its domain of validity."""


class InsufficientDataError(DomainError):
    """Not enough history or overlap to compute an estimate."""


class ConfigError(LowVolError):
    """Invalid run configuration."""
