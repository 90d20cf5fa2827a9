"""Error kinds raised across rcdm."""

from __future__ import annotations


class RcdmError(Exception):
    """Base class for every rcdm failure."""


class ShapeError(RcdmError):
    """Raised when tensor extents, ranks or channel counts do not line up."""


class NumericError(RcdmError):
    """Raised on non-finite values, zero divisors and failed numeric checks."""


class ConfigError(RcdmError):
    """Raised when a model, training or degradation setting is invalid."""


class RcdmIOError(RcdmError):
    """Raised when a file is missing, truncated or malformed."""
