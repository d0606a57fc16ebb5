"""Package-wide exception types.

The CLI maps these onto exit codes: usage errors exit 1, DataError exits 2,
NumericalError exits 3.
"""


class DataError(ValueError):
    """Malformed, inconsistent, or missing input data (files, headers, shapes)."""


class NumericalError(RuntimeError):
    """Non-finite values or numerically invalid state encountered mid-computation."""
