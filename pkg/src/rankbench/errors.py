"""Exception types shared across the package.

The CLI maps these onto distinct exit codes, so library code should raise
the most specific type that applies rather than a bare ValueError.
"""


class RankbenchError(Exception):
    """Base class for package-specific failures."""


class DataError(RankbenchError):
    """Malformed, missing, or inconsistent input data or artifacts."""


class NumericError(RankbenchError):
    """Numerical failure: non-finite loss, degenerate statistics, etc."""
