"""Exception types shared across modules."""
from __future__ import annotations

from .tridiag import IllConditionedStep

__all__ = ["NumericalBlowup", "ConvergenceError", "IllConditionedStep"]


class NumericalBlowup(ArithmeticError):
    """A simulation produced non-finite values; ``step`` is the offending time index."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class ConvergenceError(RuntimeError):
    """An iteration hit its budget; ``result`` carries the partial output."""

    def __init__(self, message: str, result=None):
        super().__init__(message)
        self.result = result
