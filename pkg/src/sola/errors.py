"""Shared exception taxonomy for the whole package."""


class SolaError(Exception):
    """Base class for every error raised by this package."""


class FormatError(SolaError):
    """Malformed binary container: bad magic, header, or payload length."""


class UnsupportedLayout(SolaError):
    """Array layout the feature store refuses (Fortran order, non-2D)."""


class DataError(SolaError):
    """Values violate data invariants (non-finite entries, single-class labels)."""


class IoError(SolaError):
    """Filesystem failure while reading or writing."""


class SpecError(SolaError):
    """Infeasible synthetic-corpus recipe."""


class TooShortError(SolaError):
    """Sequence shorter than the requested window."""


class ShapeError(SolaError):
    """Operand shapes inconsistent with the operation."""


class ConfigError(SolaError):
    """Invalid or contradictory configuration."""


class DomainError(SolaError):
    """Argument outside the mathematical domain of the function."""


class NumericsError(SolaError):
    """NaN or Inf encountered mid-computation; message names the offending tensor."""
