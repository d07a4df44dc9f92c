"""Exception types shared across the package."""


class DenseAlignError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(DenseAlignError):
    """Invalid or inconsistent run configuration."""


class LoadError(DenseAlignError):
    """A file could not be read or failed format validation."""


class NumericError(DenseAlignError):
    """A numeric invariant was violated (non-finite loss, degenerate vector, ...)."""
