"""Exception types shared across the package."""


class PdaError(Exception):
    """Base class for all package errors."""


class DimensionError(PdaError, ValueError):
    pass


class ValidityError(PdaError, ValueError):
    """Non-finite values where finite ones are required."""


class DomainError(PdaError, ValueError):
    """Input outside the domain of an operation (empty sets, K < 2, ...)."""


class ConfigError(PdaError, ValueError):
    pass


class ParseError(PdaError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class EvaluationError(PdaError, RuntimeError):
    pass


class DivergenceError(PdaError, RuntimeError):
    def __init__(self, epoch: int, term: str, value: float):
        self.epoch = epoch
        self.term = term
        self.value = value
        super().__init__(f"non-finite loss term {term!r} ({value}) at epoch {epoch}")
