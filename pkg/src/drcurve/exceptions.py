"""Exception types shared across the package."""


class DRCurveError(Exception):
    """Base class for all drcurve errors."""


class SingularDesign(DRCurveError):
    """Weighted local design matrix is numerically singular.

    Raised when a kernel window contains too few distinct treatment values
    to identify a local line, typically because the bandwidth is too small
    at the requested evaluation point.
    """


class NoConvergence(DRCurveError):
    """Iterative fitting failed to converge within the iteration cap."""


class RankDeficient(DRCurveError):
    """Design matrix is rank deficient (collinear features)."""


class DomainError(DRCurveError, ValueError):
    """Input values fall outside the domain required by the model."""


class DegenerateScale(DRCurveError):
    """Estimated conditional scale collapsed to (numerically) zero."""
