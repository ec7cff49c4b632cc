"""Exception types shared across the package."""


class HierLQRError(Exception):
    """Base class for all package errors."""


class DimensionError(HierLQRError):
    """Shapes of inputs are inconsistent."""


class SymmetryError(HierLQRError):
    """A matrix required to be symmetric is not, beyond tolerance."""


class InstabilityError(HierLQRError):
    """A closed-loop matrix has spectral radius at or above one."""

    def __init__(self, message, spectral_radius=None):
        super().__init__(message)
        self.spectral_radius = spectral_radius


class NonStabilizableError(HierLQRError):
    """The Riccati iteration diverged or failed to converge."""


class AssumptionError(HierLQRError):
    """A positive-semidefiniteness requirement on a cost matrix fails."""


class ExchangeabilityError(HierLQRError):
    """Decomposition refused: the system is not partially exchangeable."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class DecompositionIntegrityError(HierLQRError):
    """Two mathematically equal forms of a decomposed quantity disagree."""


class ConsistencyError(HierLQRError):
    """An internal invariant of a data bundle is violated."""
