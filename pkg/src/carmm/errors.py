"""Exception hierarchy.

Validation errors (bad input files, ids, weights) and numerical errors
(non-positive-definite precisions, non-finite densities) are kept apart so
the command line can map them onto distinct exit codes.
"""


class CarmmError(Exception):
    """Base class for all package errors."""


class ValidationError(CarmmError, ValueError):
    """Input data violates a structural contract."""


class NumericalError(CarmmError, ArithmeticError):
    """A numerical routine could not produce a finite answer."""


class IsolatedArea(ValidationError):
    def __init__(self, area):
        self.area = area
        super().__init__(f"area {area} has no neighbours")


class InvalidId(ValidationError):
    pass


class SelfLoop(ValidationError):
    def __init__(self, area):
        self.area = area
        super().__init__(f"self-loop on area {area}")


class EmptyRow(ValidationError):
    def __init__(self, row):
        self.row = row
        super().__init__(f"membership {row} has no positive weight")


class NegativeWeight(ValidationError):
    pass


class RowSumViolation(ValidationError):
    def __init__(self, row, total):
        self.row = row
        self.total = total
        super().__init__(f"weights of membership {row} sum to {total!r}, not 1")


class DimensionMismatch(ValidationError):
    pass


class LengthMismatch(ValidationError):
    pass


class ZeroOffset(ValidationError):
    pass


class ConstantColumn(ValidationError):
    def __init__(self, column):
        self.column = column
        super().__init__(f"covariate column {column} is constant")


class InvalidParameter(ValidationError):
    pass


class OutOfDomain(ValidationError):
    pass


class DataFormatError(ValidationError):
    """A malformed or invalid record in an input file."""

    def __init__(self, path, message, row=None):
        self.path = str(path)
        self.row = row
        where = self.path if row is None else f"{self.path}, row {row}"
        super().__init__(f"{where}: {message}")


class NotPositiveDefinite(NumericalError):
    pass


class NonFiniteDensity(NumericalError):
    pass


class DivergenceRateExceeded(UserWarning):
    """Too many divergent transitions; the fit is kept but flagged."""
