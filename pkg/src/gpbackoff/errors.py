"""Exception hierarchy shared by all modules."""


class GPBackoffError(Exception):
    """Base class for every error raised by this package."""


class NotPositiveDefinite(GPBackoffError, ValueError):
    pass


class DomainError(GPBackoffError, ValueError):
    pass


class ConvergenceFailure(GPBackoffError, RuntimeError):
    pass


class DimensionUnsupported(GPBackoffError, ValueError):
    pass


class DimensionMismatch(GPBackoffError, ValueError):
    pass


class EmptySample(GPBackoffError, ValueError):
    pass


class SingularUpdate(GPBackoffError, ValueError):
    """Schur complement of a bordered covariance is (numerically) zero."""


class AllRestartsFailed(GPBackoffError, RuntimeError):
    def __init__(self, message, output_index=None):
        super().__init__(message)
        self.output_index = output_index


class NonFinite(GPBackoffError, FloatingPointError):
    pass


class SolverDiverged(GPBackoffError, RuntimeError):
    pass


class PolicyFailure(GPBackoffError, RuntimeError):
    """The feedback policy could not produce a control at time ``t``."""

    def __init__(self, message, t=None):
        super().__init__(message)
        self.t = t


class NoSignChange(GPBackoffError, RuntimeError):
    """Back-off bisection found no bracket: already feasible at zero back-off."""
