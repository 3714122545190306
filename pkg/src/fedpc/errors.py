"""Exception types raised across the simulator."""


class FedPCError(Exception):
    """Base class for all simulator errors."""


class ConfigError(FedPCError, ValueError):
    """A configuration or precondition was violated."""


class ShapeError(FedPCError, ValueError):
    """Array dimensions disagree with the model or with each other."""


class NumericFault(FedPCError, ArithmeticError):
    """A non-finite value showed up where only finite values are allowed."""

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


class ParseError(FedPCError, ValueError):
    """A feature table could not be parsed."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class AggregationError(FedPCError, ValueError):
    """Models could not be averaged."""


class EvaluationError(FedPCError, ValueError):
    """A metric could not be computed."""
