"""Exception hierarchy shared by every module."""


class PfEigenError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(PfEigenError, ValueError):
    pass


class DegenerateWeightsError(PfEigenError, ArithmeticError):
    """All log weights are -inf, so nothing can be normalized."""


class InvariantError(PfEigenError, AssertionError):
    """An internal identity that must hold by construction did not."""


class UnsupportedDiagnosticError(PfEigenError):
    """A diagnostic needs model data (e.g. epsilon bounds) the model lacks."""


class ModelEvaluationError(PfEigenError, FloatingPointError):
    pass


class NonConvergenceError(PfEigenError, RuntimeError):
    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class ConfigError(PfEigenError, ValueError):
    pass
