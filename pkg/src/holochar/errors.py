"""Exception types shared across the pipeline.

CLI exit codes: ValidationError -> 2, NumericError -> 3, anything else -> 1.
"""


class ValidationError(ValueError):
    """Bad input data or configuration: wrong shapes, broken invariants, unparsable files."""


class NumericError(RuntimeError):
    """Numerical failure at runtime: non-finite losses, singular blends, unreachable targets."""
