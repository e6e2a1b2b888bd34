"""Exception types shared across the package."""


class HomogError(Exception):
    """Base class for all package-specific errors."""


class ParseError(HomogError):
    """Malformed expression source."""

    def __init__(self, position, message):
        self.position = position
        self.message = message
        super().__init__(f"parse error at position {position}: {message}")


class PeriodicityError(HomogError):
    """A fast variable appears outside an admitted periodic construct."""


class ValidationFailed(HomogError):
    """Coefficient validation failed; carries the offending report."""

    def __init__(self, report, message="coefficient validation failed"):
        self.report = report
        super().__init__(f"{message}: {report}")


class SolvabilityViolated(HomogError):
    """Cell right-hand side has a nonzero grid mean (no periodic solution)."""


class SolverDiverged(HomogError):
    """An iterative or direct solve failed to meet its residual contract."""


class CrossCheckFailed(HomogError):
    """Two analytically equivalent assembly forms disagree beyond tolerance."""


class CommensurabilityError(HomogError):
    """The fast period does not divide the torus length."""


class NodeMismatch(HomogError):
    """Homogenized coefficients cannot be aligned with the physical grid."""


class CacheMiss(HomogError):
    """A corrector was requested at a slow point absent from the cache."""


class ShiftInsideSpectrum(HomogError):
    """A real shift sits inside (or too close to) the numerical spectrum."""


class DimensionError(HomogError):
    """An operation received data of an unsupported spatial dimension."""


class DegenerateFit(HomogError):
    """Not enough positive-error points for a rate fit."""


class RateAnomalousWarning(UserWarning):
    """Fitted convergence rate fell below the expected first-order range."""
