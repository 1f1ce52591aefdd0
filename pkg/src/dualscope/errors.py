"""Exception hierarchy shared by all dualscope modules."""


class DualscopeError(Exception):
    """Base class for every error raised by the package."""


class ModelValidationError(DualscopeError, ValueError):
    pass


class NonSquareGenerator(ModelValidationError):
    pass


class RowSumViolation(ModelValidationError):
    def __init__(self, row, residual):
        self.row = row
        self.residual = residual
        super().__init__(f"generator row {row} sums to {residual:.3e}, expected 0")


class NegativeOffDiagonal(ModelValidationError):
    pass


class DimensionMismatch(ModelValidationError):
    pass


class NumericalOverflow(DualscopeError, OverflowError):
    pass


class BudgetExceeded(DualscopeError):
    pass


class NotInjective(DualscopeError, ValueError):
    pass


class DegenerateMass(DualscopeError, FloatingPointError):
    pass


class ZeroMass(DualscopeError, ValueError):
    pass


class FilterInstability(DualscopeError):
    """Too many negativity clamps in a probability-mode filter run."""


class SingularRegression(DualscopeError, FloatingPointError):
    pass
