"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: ValidationError -> 2,
NumericalError -> 3, I/O failures -> 4.
"""


class ValidationError(ValueError):
    """Inputs violate a documented precondition or invariant."""


class NumericalError(RuntimeError):
    """A computation produced NaN/Inf where finite values are required."""
