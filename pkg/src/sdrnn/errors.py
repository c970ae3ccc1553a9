"""Exception classes shared across the toolkit.

The CLI maps these onto distinct exit codes (config 2, data 3, numeric 4).
"""


class SdrnnError(Exception):
    """Base class for toolkit errors."""


class ConfigError(SdrnnError):
    """Invalid or inconsistent configuration / arguments."""


class DataError(SdrnnError):
    """Malformed or missing input data (files, manifests, shapes)."""


class NumericError(SdrnnError):
    """Numeric failure: divergence, infeasible scale factor, overflow."""
