"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes, so library code should raise the
most specific subclass that applies rather than bare ValueError/RuntimeError
for anything a user-facing command can hit.
"""


class StraightflowError(Exception):
    """Base class for all package-specific errors."""


class UsageError(StraightflowError):
    """Bad configuration, malformed input files, or invalid argument values."""


class NumericalError(StraightflowError):
    """A numerical computation produced an unusable result (NaN/Inf/underflow)."""


class SingularMatrixError(NumericalError):
    """Triangular or structured solve hit a zero (or non-finite) pivot."""


class SingularityError(NumericalError):
    """Interpolant inverse/log-determinant evaluated too close to t = 1."""


class DegeneratePosteriorError(NumericalError):
    """All posterior candidate weights underflowed to zero for some query point."""


class IntegrationError(NumericalError):
    """ODE integration produced non-finite states."""


class OutputError(StraightflowError):
    """Filesystem writes or reads failed; message carries the path."""
