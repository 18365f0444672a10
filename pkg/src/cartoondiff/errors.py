"""Exception types shared across the filtering pipeline."""


class CartoonDiffError(Exception):
    pass


class FormatError(CartoonDiffError, ValueError):
    """Malformed or unsupported image/volume file."""


class DegenerateMeanError(CartoonDiffError, ZeroDivisionError):
    """Raised when a relative distance to the mean is requested for a zero-mean image."""


class DominanceError(CartoonDiffError, ArithmeticError):
    """A tridiagonal system handed to the solver is not diagonally dominant."""


class StabilityError(CartoonDiffError, ValueError):
    """Explicit time step above the stability limit."""


class ConvergenceError(CartoonDiffError, ArithmeticError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class NotSettledError(CartoonDiffError, ArithmeticError):
    def __init__(self, message, ratio=None, steps=None):
        super().__init__(message)
        self.ratio = ratio
        self.steps = steps
