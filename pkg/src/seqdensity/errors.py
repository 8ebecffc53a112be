"""Exception types shared across the suite.

Each class maps to one CLI exit code so scripts can tell configuration
problems from data problems from numerical blow-ups.
"""


class SeqDensityError(Exception):
    exit_code = 1


class ConfigError(SeqDensityError, ValueError):
    exit_code = 2


class DataError(SeqDensityError):
    exit_code = 3


class EmptyDatasetError(DataError, ValueError):
    pass


class MissingArtifactError(DataError, FileNotFoundError):
    pass


class ConfigHashMismatch(DataError):
    pass


class NumericalError(SeqDensityError, ArithmeticError):
    exit_code = 4


class ShapeError(SeqDensityError, ValueError):
    pass


class LengthError(SeqDensityError, ValueError):
    pass


class InsufficientDataError(SeqDensityError, ValueError):
    pass


class UndefinedScoreError(SeqDensityError, ValueError):
    pass
