"""Exception types raised across the package."""


class LearnedSISError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(LearnedSISError, ValueError):
    pass


class DimensionMismatch(ShapeMismatch):
    pass


class NotSymmetric(LearnedSISError, ValueError):
    pass


class JitterCapExceeded(LearnedSISError, ArithmeticError):
    """Cholesky failed even at the largest permitted diagonal jitter.

    Usually means a learned covariance has become badly conditioned.
    """


class RootNotScalar(LearnedSISError, ValueError):
    pass


class TapeAlreadySwept(LearnedSISError, RuntimeError):
    pass


class TimeIndexOutOfRange(LearnedSISError, IndexError):
    pass


class NonFiniteGradient(LearnedSISError, ArithmeticError):
    pass


class AllWeightsDegenerate(LearnedSISError, ArithmeticError):
    """Every log-weight is -inf (or NaN) after an update."""

    def __init__(self, message="all particle weights are degenerate", t=None):
        super().__init__(message if t is None else f"{message} at t={t}")
        self.t = t


class DegenerateGeometry(LearnedSISError, RuntimeError):
    pass


class SingularInnovationCovariance(LearnedSISError, ArithmeticError):
    pass


class TooManyDivergedRuns(LearnedSISError, RuntimeError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class ZeroTargetNorm(LearnedSISError, ZeroDivisionError):
    def __init__(self, t):
        super().__init__(f"target has zero norm at t={t}")
        self.t = t
