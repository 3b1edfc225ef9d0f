"""Exception types shared across the package."""


class LadyError(Exception):
    """Base class for all package-specific failures."""


class CertificationError(LadyError):
    """A coefficient set fails one of its certified pointwise bounds."""


class InstabilityError(LadyError):
    """A time step produced NaN/Inf; carries the name of the offending term."""

    def __init__(self, term, message=""):
        self.term = term
        super().__init__(message or f"non-finite values in term '{term}'")


class ConvergenceError(LadyError):
    """An iterative solve did not reach its tolerance."""

    def __init__(self, message, residual_history=None):
        self.residual_history = list(residual_history or [])
        super().__init__(message)


class UnsupportedModeError(LadyError):
    """Requested solver mode cannot handle the given coefficients."""


class CoverageError(LadyError):
    """Effective-law lookup hit gradients outside the cache with fallback off."""

    def __init__(self, missing_nodes, message=""):
        self.missing_nodes = list(missing_nodes)
        super().__init__(message or f"{len(self.missing_nodes)} uncached lattice nodes")


class StudyError(LadyError):
    """Every solve in a convergence study failed."""
