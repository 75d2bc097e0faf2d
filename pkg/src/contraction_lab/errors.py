"""Exception hierarchy shared by all modules."""

from __future__ import annotations


class LabError(Exception):
    """Base class for every error raised by contraction_lab."""


class EvaluationError(LabError, ArithmeticError):
    """A field or expression was evaluated outside its domain."""


class DSLSyntaxError(LabError, ValueError):
    def __init__(self, message: str, offset: int, expected: tuple[str, ...] = ()):
        self.offset = offset
        self.expected = tuple(expected)
        detail = f" (expected one of: {', '.join(self.expected)})" if self.expected else ""
        super().__init__(f"{message} at byte offset {offset}{detail}")


class UnknownIdentifier(LabError, ValueError):
    def __init__(self, name: str, offset: int):
        self.name = name
        self.offset = offset
        super().__init__(f"unknown identifier {name!r} at byte offset {offset}")


class ArityMismatch(LabError, ValueError):
    pass


class EigenvalueViolation(LabError):
    """lambda0**2 exceeds the smallest eigenvalue of sigma sigma^T somewhere."""


class NonFinite(LabError, FloatingPointError):
    """Divergence guard tripped or a non-finite number appeared."""


class EmptyInput(LabError, ValueError):
    pass


class SizeMismatch(LabError, ValueError):
    pass


class DimensionMismatch(LabError, ValueError):
    pass


class BracketFailure(LabError):
    """A monotone root could not be bracketed."""


class TooLarge(LabError, ValueError):
    pass


class CoincidentPoints(LabError, ValueError):
    pass


class NoValidR0(LabError):
    pass


class NonPositiveRate(LabError):
    pass


class DivergentTail(LabError):
    pass


class InsufficientDecay(LabError):
    pass


class StencilError(LabError):
    pass


class ConfigError(LabError, ValueError):
    def __init__(self, message: str, pointer: str = ""):
        self.pointer = pointer
        super().__init__(f"{pointer or '/'}: {message}")
