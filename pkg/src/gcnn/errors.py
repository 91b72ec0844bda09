"""Exception types shared across the package.

Each class carries the CLI exit code it maps to.
"""


class GCNNError(Exception):
    exit_code = 1


class InvalidArgument(GCNNError, ValueError):
    exit_code = 1


class ConfigError(GCNNError, ValueError):
    exit_code = 1


class NumericalFailure(GCNNError, ArithmeticError):
    exit_code = 2

    def __init__(self, message, residual=None, layer=None):
        super().__init__(message)
        self.residual = residual
        self.layer = layer


class CoarseningStall(NumericalFailure):
    pass


class FormatError(GCNNError, IOError):
    exit_code = 3

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
