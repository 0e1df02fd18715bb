"""Errors raised by ttcme.

Every error derives from :class:`TTCMEError`. Indices shown in messages
(modes, bonds, steps) are 1-based.
"""

from typing import Optional, Sequence


class TTCMEError(Exception):
    """Base exception."""


class ShapeMismatchError(TTCMEError, ValueError):
    def __init__(self, operation: str, left: Sequence[int], right: Sequence[int]):
        self.operation = operation
        self.left = tuple(left)
        self.right = tuple(right)
        super().__init__(str(self))

    def __str__(self) -> str:
        return f"{self.operation}: mode sizes {self.left} and {self.right} differ"


class InvalidTensorError(TTCMEError, ValueError):
    def __init__(self, reason: str):
        self.reason = reason
        super().__init__(reason)

    def __str__(self) -> str:
        return self.reason


class DenseCapError(TTCMEError):
    def __init__(self, size: int, cap: int):
        self.size = size
        self.cap = cap
        super().__init__(str(self))

    def __str__(self) -> str:
        return f"densification of {self.size} entries exceeds the cap of {self.cap}"


class QuantizationError(TTCMEError, ValueError):
    def __init__(self, mode: int, size: int, reason: str = "is not a power of two"):
        self.mode = mode
        self.size = size
        self.reason = reason
        super().__init__(str(self))

    def __str__(self) -> str:
        return f"mode {self.mode + 1} of size {self.size} {self.reason}"


class PropensityError(TTCMEError, ValueError):
    def __init__(self, reaction: str, reason: str):
        self.reaction = reaction
        self.reason = reason
        super().__init__(str(self))

    def __str__(self) -> str:
        return f"reaction '{self.reaction}': {self.reason}"


class PatternError(TTCMEError, ValueError):
    def __init__(self, reason: str, reaction: Optional[str] = None):
        self.reason = reason
        self.reaction = reaction
        super().__init__(str(self))

    def __str__(self) -> str:
        if self.reaction:
            return f"cme_model: reaction '{self.reaction}' {self.reason}"
        return f"cme_model: {self.reason}"


class LocalSolveError(TTCMEError):
    def __init__(self, bond: int, reason: str):
        self.bond = bond
        self.reason = reason
        super().__init__(str(self))

    def __str__(self) -> str:
        return f"amen: local system at core {self.bond + 1}: {self.reason}"


class SolverDivergenceError(TTCMEError):
    def __init__(self, sweep: int, residual: float, best: float):
        self.sweep = sweep
        self.residual = residual
        self.best = best
        super().__init__(str(self))

    def __str__(self) -> str:
        return (
            f"amen: diverged at sweep {self.sweep}: residual {self.residual:.3e} "
            f"against best {self.best:.3e}"
        )


class SolverError(TTCMEError):
    """Failure of an outer solver loop (time interval or Euler iteration).

    Attributes:
        stage (str): Module and loop that failed
        step (int): 0-based interval or iteration index
        reason (str): Underlying error message
        partial (object): Whatever was computed before the failure
    """

    def __init__(self, stage: str, step: int, reason: str, partial: object = None):
        self.stage = stage
        self.step = step
        self.reason = reason
        self.partial = partial
        super().__init__(str(self))

    def __str__(self) -> str:
        return f"{self.stage}: step {self.step + 1}: {self.reason}"


class OracleCapError(TTCMEError):
    def __init__(self, states: int, cap: int):
        self.states = states
        self.cap = cap
        super().__init__(str(self))

    def __str__(self) -> str:
        return f"oracle: {self.states} states exceed the cap of {self.cap}"


class ConfigError(TTCMEError, ValueError):
    """All problems found in a model config, listed with their field paths."""

    def __init__(self, errors: Sequence[tuple[str, str]], source: Optional[str] = None):
        self.errors = list(errors)
        self.source = source
        super().__init__(str(self))

    def __str__(self) -> str:
        head = f"invalid config {self.source}" if self.source else "invalid config"
        lines = [f"  {path}: {message}" for path, message in self.errors]
        return "\n".join([f"{head} ({len(self.errors)} errors)", *lines])
