"""Exception hierarchy shared by every module in the package."""

from __future__ import annotations


class CaropeError(Exception):
    """Base class for all package errors."""


class DimensionError(CaropeError):
    """A tensor shape, axis, or dtype does not fit the operation."""


class ContractError(CaropeError):
    """An API precondition was violated (bad argument, reused tape, ...)."""


class ConfigError(CaropeError):
    """A configuration value is missing, unknown, or out of range."""


class IngestionError(CaropeError):
    """A corpus or checkpoint file is missing, empty, or malformed."""


class PositionRangeError(CaropeError):
    """A sequence exceeds what a fixed position table supports."""


class NumericError(CaropeError):
    """A non-finite value appeared where finite math was required."""


class GradCheckError(CaropeError):
    """The analytic/finite-difference comparison exceeded tolerance."""
