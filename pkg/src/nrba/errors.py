"""Shared exception types. The CLI maps these onto exit codes."""


class NrbaError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(NrbaError):
    """Invalid run configuration or schema file."""


class DataError(NrbaError):
    """Malformed or inconsistent input data."""


class NumericalError(NrbaError):
    """A numerical routine failed (non-convergence, singularity, ...)."""


class ConvergenceError(NumericalError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


class SeparationError(NumericalError):
    def __init__(self, message, columns=None):
        super().__init__(message)
        self.columns = columns or []


class SingularMatrixError(NumericalError):
    def __init__(self, message, columns=None):
        super().__init__(message)
        self.columns = columns or []
