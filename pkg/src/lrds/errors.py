"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: validation problems exit with 3,
numerical failures with 4, everything config/usage related with 2.
"""


class LRDSError(Exception):
    """Base class for all package errors."""


class InvalidArgument(LRDSError, ValueError):
    pass


class ConfigError(LRDSError):
    pass


class CapacityError(LRDSError):
    pass


class NumericalError(LRDSError, ArithmeticError):
    pass


class ConvergenceError(NumericalError):
    def __init__(self, message, residual=float("nan"), iterations=0):
        super().__init__(f"{message} (residual={residual:.3e}, iterations={iterations})")
        self.residual = residual
        self.iterations = iterations


class ValidationError(LRDSError):
    pass


class ParseError(ValidationError):
    def __init__(self, message, line=None):
        where = f"line {line}: " if line is not None else ""
        super().__init__(where + message)
        self.line = line


class FormatError(ValidationError):
    pass
