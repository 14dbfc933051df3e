"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class PitttError(Exception):
    exit_code = 1


class InputIOError(PitttError, OSError):
    exit_code = 2


class InvalidDataError(PitttError, ValueError):
    exit_code = 3


class CaseFormatError(InvalidDataError):
    """Malformed or semantically invalid case text."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DatasetFormatError(InvalidDataError):
    pass


class ModelFormatError(InvalidDataError):
    pass


class TopologyError(InvalidDataError):
    """Zero-impedance branch or disconnected network."""


class DimensionError(PitttError, ValueError):
    exit_code = 4


class NumericalError(PitttError, ArithmeticError):
    exit_code = 5


class SingularJacobianError(NumericalError):
    def __init__(self, iteration):
        self.iteration = iteration
        super().__init__(f"singular Jacobian at Newton iteration {iteration}")
