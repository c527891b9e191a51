"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: input problems exit 2, numeric or
convergence failures exit 1.
"""


class CrokitError(Exception):
    """Base class for all library errors."""


class InputError(CrokitError, ValueError):
    """Caller passed inconsistent dimensions, infeasible points, or bad files."""


class NumericError(CrokitError, ArithmeticError):
    """Non-finite values, singular matrices, or other numerical breakdown."""


class StateError(CrokitError, RuntimeError):
    """Operation invoked out of order (e.g. backward before forward)."""


class ConvergenceError(CrokitError, RuntimeError):
    """An iterative fit ran out of budget before reaching its tolerance."""

    def __init__(self, message, grad_norm=None):
        super().__init__(message)
        self.grad_norm = grad_norm
