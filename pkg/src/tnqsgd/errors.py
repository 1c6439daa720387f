"""Exception hierarchy shared by every module of the package."""


class TNQError(Exception):
    """Base class for all package errors."""


class InvalidInputError(TNQError, ValueError):
    pass


class InvalidParameterError(TNQError, ValueError):
    pass


class NormalizationError(TNQError, ValueError):
    """A density does not integrate to its level budget."""


class InvalidDensityError(TNQError, ValueError):
    pass


class QuantRangeError(TNQError, ValueError):
    """Value or index outside the quantization grid."""


class FormatError(TNQError, ValueError):
    """Malformed binary file (bad magic, version or header)."""


class LengthError(FormatError):
    pass


class CorruptionError(FormatError):
    pass


class DegenerateModelError(TNQError, ValueError):
    """Laplace scale estimate is zero."""


class NumericalError(TNQError, ArithmeticError):
    def __init__(self, message, **diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


class ConfigurationError(TNQError, ValueError):
    pass


class ProtocolError(TNQError, ValueError):
    pass


class ContractViolation(TNQError, ValueError):
    pass


class DivergenceError(NumericalError):
    pass
