"""Exception taxonomy shared across the package.

CLI exit-code mapping: ValidationError -> 1, everything else -> 2.
"""


class HstgError(Exception):
    """Base class for all package errors."""


class ValidationError(HstgError):
    """Bad input values, malformed files, or violated preconditions."""


class DimensionError(HstgError):
    """Array shapes incompatible with the requested operation."""


class NumericError(HstgError):
    """An operation produced a non-finite value (fail-fast policy)."""


class TrainingError(HstgError):
    """Training diverged or could not proceed."""
