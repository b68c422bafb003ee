"""Exception and warning types shared across the package."""


class ErmasymError(Exception):
    """Base class for all numerical failures raised by ermasym."""


class QuadratureNonConvergence(ErmasymError):
    pass


class NonFiniteIntegrand(ErmasymError):
    pass


class ProxNonConvergence(ErmasymError):
    pass


class NotTwiceDifferentiable(ErmasymError):
    pass


class NoConvergence(ErmasymError):
    pass


class SeparableDataError(NoConvergence):
    """The requested ratio lies at or below the separability threshold."""


class DivergingIterates(NoConvergence):
    pass


class MeanNotPositive(ErmasymError):
    pass


class SigmaTooSmall(ErmasymError):
    pass


class NoRoot(ErmasymError):
    pass


class DensityNotDifferentiable(ErmasymError):
    pass


class NonConvexInner(ErmasymError):
    pass


class AchievabilityFailed(ErmasymError):
    pass


class OptimizerDiverged(ErmasymError):
    pass


class SeparableData(UserWarning):
    """Training data is (or is predicted to be) linearly separable."""
