"""Exception hierarchy shared across the package."""


class DriftbcError(Exception):
    """Base class for all package errors."""


class ShapeError(DriftbcError):
    """Input dimensions do not match what a model or operation expects."""


class NumericError(DriftbcError):
    """A computation produced non-finite values or could not be solved."""


class ConfigError(DriftbcError):
    """Invalid configuration, missing artifact, or inconsistent flags."""


class DataError(DriftbcError):
    """Malformed, truncated, or inconsistent dataset content."""
