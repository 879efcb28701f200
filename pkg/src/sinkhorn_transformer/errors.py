"""Exception hierarchy shared by every module.

The CLI maps ``InvalidInputError`` (a violated precondition on user input)
to exit status 2 and every other ``DomainError`` to exit status 1.
"""


class DomainError(Exception):
    """Base class for failures of a well-formed request."""


class InvalidInputError(DomainError, ValueError):
    pass


class DimensionMismatchError(InvalidInputError):
    pass


class NumericError(DomainError, ArithmeticError):
    pass


class ConvergenceError(DomainError):
    """Raised when an iterative solver exhausts its budget.

    The last observed violation is kept on the exception so callers can
    decide whether the partial result is still usable.
    """

    def __init__(self, message, final_violation=None, iters=None):
        super().__init__(message)
        self.final_violation = final_violation
        self.iters = iters


class SizeError(InvalidInputError):
    pass


class UnattainableError(DomainError):
    pass
