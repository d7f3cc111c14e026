"""Exception hierarchy shared by every hinet module.

The CLI maps these onto process exit codes, so keep the classes coarse.
"""


class HiNetError(Exception):
    exit_code = 1


class ConfigError(HiNetError, ValueError):
    exit_code = 2


class DataError(HiNetError, ValueError):
    exit_code = 3


class FormatError(DataError):
    """Unreadable or malformed volume / checkpoint file."""


class DimensionError(DataError):
    pass


class StructureError(DataError):
    pass


class NumericError(HiNetError, ArithmeticError):
    exit_code = 4

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
