"""Exception types shared across the package.

The CLI maps these onto stable exit codes: config/usage problems exit 2,
data problems exit 3, numeric failures exit 4.
"""


class HistocapError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(HistocapError):
    """Operands or stored tensors have incompatible shapes."""


class NumericError(HistocapError):
    """An operation produced NaN/Inf, or a loss became non-finite."""


class DataError(HistocapError):
    """Unreadable, malformed or missing input data (files, manifests, archives)."""


class ConfigError(HistocapError):
    """Invalid or inconsistent configuration."""
