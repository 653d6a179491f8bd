"""Exception types shared across the package.

Plain ``ValueError`` is used for invalid arguments (bad radii, even
resolutions, out-of-range exponents).  The classes below mark failures
with domain meaning, so callers can react (restart with a harder
prescale, fall back to another backend, report divergence).
"""

from __future__ import annotations


class CrflatError(Exception):
    """Base class for domain errors."""


class DegenerateSurfaceError(CrflatError):
    """The graph defining function has r_n = 0 somewhere on the chart."""


class UnsupportedSurfaceError(CrflatError):
    """Operation requires the hyperquadric (h = 0) but got a general surface."""


class UnsupportedScaleError(CrflatError):
    """Grid-backend pullback requested at a scale the lattice cannot realize."""


class GaugeSingularError(CrflatError):
    """A gauge matrix is singular (or nearly so) at some chart point."""

    def __init__(self, message: str, point=None, sigma_min: float | None = None):
        super().__init__(message)
        self.point = point
        self.sigma_min = sigma_min


class NoSolutionError(CrflatError):
    """Jet equations are inconsistent (asymmetric coefficients)."""

    def __init__(self, message: str, defect: float | None = None):
        super().__init__(message)
        self.defect = defect


class SolverFailureError(CrflatError):
    """Iterative solve did not reach the residual tolerance."""

    def __init__(self, message: str, best=None, residual: float | None = None):
        super().__init__(message)
        self.best = best
        self.residual = residual


class NonUniqueSolutionError(CrflatError):
    """Unregularized least squares hit a rank-deficient system."""


class SmallnessViolationError(CrflatError):
    """The contraction predicate failed at some iteration step."""

    def __init__(self, message: str, norms: dict | None = None):
        super().__init__(message)
        self.norms = norms or {}


class DivergedError(CrflatError):
    """The iteration error grew on consecutive steps."""

    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = trace


class FrameDegenerateError(CrflatError):
    """The accumulated frame lost invertibility on the limit domain."""


class FormatError(CrflatError):
    """A field container file is corrupt or has the wrong magic/version."""
