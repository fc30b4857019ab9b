"""Exception hierarchy shared by all logshe modules."""


class LogSheError(Exception):
    """Base class for every error raised by logshe."""


class InvalidArgumentError(LogSheError, ValueError):
    """An argument is outside its documented domain."""


class IsolatedUnitError(InvalidArgumentError):
    """A weight-matrix row sums to zero, so it cannot be row-standardized."""


class NumericalError(LogSheError, ArithmeticError):
    """A linear-algebra routine failed or produced non-finite output."""


class SingularOperatorError(NumericalError):
    """I - rho*W (or another operator) is numerically singular."""


class DomainError(InvalidArgumentError):
    """rho lies outside the admissible interval of the operator family."""


class DeterminantSignError(NumericalError):
    """det A(rho) is not positive, so log det A(rho) is undefined."""


class NonFiniteVarianceError(NumericalError):
    """h_i(theta) overflowed."""


class DGPInstabilityError(NumericalError):
    """The linear system defining log Y^2 of a simulated design is singular."""


class FitFailedError(LogSheError):
    """An optimizer did not converge. ``best`` carries the best iterate found."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class DegenerateFitError(FitFailedError):
    """The fitted model is degenerate (e.g. zero residual variance)."""


class InstrumentRankError(InvalidArgumentError):
    """The instrument matrix Q is rank deficient."""


class ConstraintError(InvalidArgumentError):
    """A constraint is infeasible, rank deficient or malformed."""


class IncompatibleFitsError(InvalidArgumentError):
    """Two fits do not share the weighting matrix required by a test."""


class NotOveridentifiedError(InvalidArgumentError):
    """The J test needs more moments than parameters."""


class UnsupportedMethodError(InvalidArgumentError):
    """The requested operation is not defined for this estimator."""


class ConfigError(InvalidArgumentError):
    """A run configuration failed validation."""


class HarnessError(LogSheError):
    """The Monte Carlo harness could not emit a table."""


class InconsistentFitsError(IncompatibleFitsError):
    """The constrained objective falls below the unconstrained one."""
