"""Exception and warning types shared across the package."""


class DiffEMError(Exception):
    """Base class for numerical failures (CLI exit code 2)."""


class ArgumentError(ValueError):
    """Invalid input or configuration (CLI exit code 1)."""


class DegenerateCovariance(DiffEMError):
    """A covariance matrix lost positive definiteness.

    ``pivot`` is the index of the first non-positive Cholesky pivot and
    ``component`` the mixture component it belongs to, when known.
    """

    def __init__(self, message, pivot=None, component=None):
        super().__init__(message)
        self.pivot = pivot
        self.component = component


class SingularSystem(DiffEMError):
    """``I - dF/dtheta`` could not be inverted reliably."""

    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


class NotConverged(DiffEMError):
    """An iterative solver hit its iteration cap; ``result`` holds the last iterate."""

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class MalformedImage(ValueError):
    """Bytes that could not be decoded as an 8-bit PNG image."""


class NearSingularWarning(RuntimeWarning):
    """Zero divisors were masked in the square-root differential."""
