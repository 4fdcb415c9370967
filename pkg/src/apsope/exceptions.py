"""Exception hierarchy.

Every error carries an ``exit_code`` so the command line can map failures onto
its stable contract: 2 for configuration problems, 3 for data problems and 4
for numerical failures.
"""


class ApsError(Exception):
    exit_code = 4


class ConfigError(ApsError, ValueError):
    exit_code = 2

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class DataError(ApsError, ValueError):
    exit_code = 3


class NumericalError(ApsError, ArithmeticError):
    exit_code = 4


class EmptyDataset(DataError):
    pass


class ParseError(DataError):
    def __init__(self, message, row=None, column=None):
        loc = []
        if row is not None:
            loc.append(f"row {row}")
        if column is not None:
            loc.append(f"column {column!r}")
        super().__init__(f"{message} ({', '.join(loc)})" if loc else message)
        self.row = row
        self.column = column


class UnknownAction(DataError):
    pass


class MissingValue(ParseError):
    pass


class DimensionMismatch(DataError):
    pass


class EmptyCell(DataError):
    pass


class DegenerateDeciles(DataError):
    pass


class NonPositiveBandwidth(ConfigError):
    pass


class OffsetOutOfRange(ValueError, ApsError):
    exit_code = 2


class RankDeficient(NumericalError):
    pass


class SubsampleTooSmall(NumericalError):
    pass


class FullCollinearity(NumericalError):
    pass


class MissingFit(NumericalError):
    pass


class DenominatorNearZero(NumericalError):
    pass
