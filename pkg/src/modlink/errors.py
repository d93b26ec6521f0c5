"""Exception hierarchy shared across the package.

Two top-level categories map onto the CLI exit codes: model/input problems
(``ValidationError``, exit 1) and numerical failures (``NumericalError``,
exit 2).
"""


class ModlinkError(Exception):
    """Base class for all package errors."""

    exit_code = 2


class ValidationError(ModlinkError):
    """Invalid model data, manifest, or operation arguments."""

    exit_code = 1


class NumericalError(ModlinkError):
    """A numerical procedure failed (singular solve, non-convergence, ...)."""

    exit_code = 2


class SingularFrequencyError(NumericalError):
    """A frequency-domain solve hit a (near-)singular matrix.

    Carries the offending angular frequency and, when available, the
    reciprocal condition number estimate.
    """

    def __init__(self, message, omega, rcond=None):
        super().__init__(message)
        self.omega = omega
        self.rcond = rcond


class GridRangeError(ValidationError):
    """A physical spring position fell outside its virtual-point grid span."""


class PortMismatchError(ValidationError):
    """Port sets of two systems that must agree do not."""


class CacheMissError(ValidationError):
    """A frequency grid was requested that the supplied FRF data does not cover."""
