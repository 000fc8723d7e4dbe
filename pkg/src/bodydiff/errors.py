"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes, so library code should
raise the most specific class that applies rather than bare ValueError.
"""


class BodyDiffError(Exception):
    """Base class for all package-specific errors."""

    kind = "internal"


class UsageError(BodyDiffError):
    """Bad arguments, unknown options, malformed config keys."""

    kind = "usage"


class DataError(BodyDiffError):
    """Malformed or inconsistent input data (files, headers, shapes)."""

    kind = "data"


class NumericError(BodyDiffError):
    """Numerical failure: non-finite values, impossible schedules."""

    kind = "numeric"
