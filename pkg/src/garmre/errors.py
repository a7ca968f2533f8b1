"""Exception hierarchy. Each class carries the process exit code used by the CLI."""


class GarmReError(Exception):
    exit_code = 1


class ConfigError(GarmReError, ValueError):
    exit_code = 2


class ShapeError(GarmReError, ValueError):
    exit_code = 3


class NumericError(GarmReError, ArithmeticError):
    exit_code = 4


class OrderError(GarmReError, ValueError):
    exit_code = 5


class EmptyMaskError(GarmReError, ValueError):
    exit_code = 6


class CategoryError(GarmReError, KeyError):
    exit_code = 7

    def __str__(self):
        return Exception.__str__(self)


class FusionSiteError(ShapeError):
    exit_code = 8


class SampleError(GarmReError, ValueError):
    exit_code = 9


class DataError(GarmReError, ValueError):
    exit_code = 10


class CurationError(GarmReError, ValueError):
    exit_code = 11


class CorrectionError(GarmReError, ValueError):
    exit_code = 12


class StageError(GarmReError, RuntimeError):
    exit_code = 13


class DivergenceError(GarmReError, FloatingPointError):
    exit_code = 14


class IncompatibleCheckpointError(GarmReError, ValueError):
    exit_code = 15


class CorruptCheckpointError(GarmReError, ValueError):
    exit_code = 16


class IoError(GarmReError, OSError):
    exit_code = 17
