"""Exception hierarchy shared by all modules.

The CLI maps these onto exit codes: configuration problems exit 1, data
problems exit 2 and numerical failures exit 3.
"""


class CoalmtlError(Exception):
    """Base class for every error raised by the package."""


class ConfigError(CoalmtlError, ValueError):
    """Invalid hyperparameters, variants or command-line options."""


class DataError(CoalmtlError, ValueError):
    """Malformed or inconsistent input data."""


class InvalidTreeError(CoalmtlError, ValueError):
    """A tree violates the binary/time-ordering invariants."""


class NumericalError(CoalmtlError, ArithmeticError):
    """A linear solve, factorization or optimizer failed."""


class ConvergenceError(NumericalError):
    """An iterative solver hit its iteration cap.

    Parameters
    ----------
    message : str
        Human readable description.
    grad_norm : float
        Gradient norm at the final iterate.
    """

    def __init__(self, message, grad_norm=float("nan")):
        super().__init__(message)
        self.grad_norm = grad_norm
