"""Error kinds raised across the vitstem modules."""

from __future__ import annotations


class VitStemError(Exception):
    """Base class for every vitstem error."""


class DimensionError(VitStemError, ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(VitStemError, ValueError):
    """A configuration violates one of its invariants."""


class InputError(VitStemError, ValueError):
    """A call-time input is outside the accepted domain."""


class UnknownModelError(VitStemError, KeyError):
    """A canonical model name is not recognized."""

    def __str__(self) -> str:
        # KeyError quotes its argument; keep the message readable.
        return str(self.args[0]) if self.args else ""


class AggregationError(VitStemError, KeyError):
    """A record required for aggregation is missing."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class UndefinedCorrelationError(VitStemError, ValueError):
    """Correlation is undefined for the given samples."""
