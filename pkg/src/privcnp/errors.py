"""Exception types shared across the package.

Domain errors (bad argument values) raise plain ``ValueError`` throughout;
the classes here cover failures that can only be detected at runtime.
"""


class NumericalError(RuntimeError):
    """A numerical routine failed to converge or produced a non-finite result."""


class FactorisationError(NumericalError):
    """Cholesky factorisation failed even after jitter escalation."""


class DataError(ValueError):
    """Malformed external data (task files, CSV inputs)."""
