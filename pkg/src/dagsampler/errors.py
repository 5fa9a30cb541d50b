"""Error types shared across the package.

The CLI maps these onto process exit codes: configuration problems exit
with 2, data problems with 3, numeric failures with 4.
"""

from __future__ import annotations


class DagSamplerError(Exception):
    """Base class for all package errors."""


class ConfigError(DagSamplerError):
    """A configuration value or combination of values is invalid."""


class DataError(DagSamplerError):
    """Input data violates a shape, header, or domain contract."""


class NumericError(DagSamplerError):
    """A numeric computation failed (non-finite values, singular input,
    degenerate weights)."""


class CycleError(DataError):
    """A directed cycle was found where a DAG is required.

    The message names at least one edge on the offending cycle.
    """


class DegeneratePotentialError(NumericError):
    """Node potentials contain ties, so the induced ordering is ambiguous."""
