"""Exception hierarchy. Each class carries the CLI exit code for its error class."""


class SpikeGradError(Exception):
    exit_code = 1


class ConfigError(SpikeGradError):
    exit_code = 2


class PreconditionError(SpikeGradError, ValueError):
    exit_code = 3


class ShapeError(PreconditionError):
    """Connected nodes or arrays have incompatible shapes."""


class DegenerateDistributionError(PreconditionError):
    """A Bernoulli parameter sits on the boundary {0, 1}."""


class EnumerationSizeError(PreconditionError):
    pass


class KernelDegenerateError(PreconditionError):
    pass


class UndefinedFanoError(PreconditionError):
    pass


class NumericError(SpikeGradError, ArithmeticError):
    exit_code = 4

    def __init__(self, message, *, index=None, step=None, where=None):
        super().__init__(message)
        self.index = index
        self.step = step
        self.where = where


class CalibrationError(SpikeGradError):
    exit_code = 5


class FormatError(SpikeGradError, ValueError):
    exit_code = 6


class UnreachableError(SpikeGradError, RuntimeError):
    """A tape node has an op-kind no backward rule knows about."""

    exit_code = 7
