"""Errors raised by the filtering and estimation routines."""


class InvalidCovarianceError(ValueError):
    """A covariance matrix is not symmetric positive definite."""


class NumericalDegeneracyError(ArithmeticError):
    """A linear solve became numerically degenerate (singular or
    condition number beyond the supported range)."""


class DegenerateWindowError(NumericalDegeneracyError):
    """An estimation window is too poorly conditioned to produce
    parameter updates (e.g. singular smoothed second-moment sum)."""
