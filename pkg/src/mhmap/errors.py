"""Exception types raised across the package."""


class MHMapError(Exception):
    """Base class for all package errors."""


class DomainError(MHMapError, ValueError):
    """A log-likelihood term was evaluated outside its support."""


class DimensionError(MHMapError, ValueError):
    """Array shapes do not agree with the model dimensions."""


class InfeasibleStart(MHMapError):
    """No strictly feasible starting point could be found."""


class SingularSystem(MHMapError, ArithmeticError):
    """A linear system that must be positive definite is not."""


class InvalidParameter(MHMapError, ValueError):
    pass


class DegenerateTriangle(MHMapError, ValueError):
    pass


class PointOutsideDomain(MHMapError, ValueError):
    pass


class ParseError(MHMapError, ValueError):
    """Malformed mesh or config file. ``line`` is 1-based when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConfigError(MHMapError, ValueError):
    """Invalid experiment configuration; ``key`` names the offending entry."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class EmptyInput(MHMapError, ValueError):
    pass
