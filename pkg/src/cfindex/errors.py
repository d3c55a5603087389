"""Exception types raised by the estimation stack."""


class CfIndexError(Exception):
    """Base class for all errors raised by this package."""


class RankDeficient(CfIndexError):
    """Design matrix does not have full column rank."""

    def __init__(self, column, message=None):
        self.column = column
        super().__init__(message or f"design matrix is rank deficient at column {column}")


class Separation(CfIndexError):
    """Complete or quasi-complete separation in a binary/multinomial fit."""


class EmptyClass(CfIndexError):
    """A response class has no observations."""


class DegenerateOutcome(CfIndexError):
    """Outcome mean is not strictly positive, so the index is undefined."""


class NumericDegeneracy(CfIndexError):
    """A ratio denominator vanished."""


class DataError(CfIndexError):
    """Malformed input data (missing column, unparseable cell, empty set)."""
