"""Exception hierarchy shared across the package."""

from __future__ import annotations


class SubriftError(Exception):
    """Base class for all library errors."""


class ModelEvaluationError(SubriftError):
    def __init__(self, message: str, field_index: int | None = None):
        super().__init__(message)
        self.field_index = field_index


class FlowEscapeError(SubriftError):
    """State left the escape bound (numerical stand-in for a finite explosion time)."""

    def __init__(self, message: str, t: float | None = None, count: int | None = None):
        super().__init__(message)
        self.t = t
        self.count = count


class NonFiniteError(SubriftError):
    pass


class LinearizationError(SubriftError):
    pass


class NoConvergenceError(SubriftError):
    def __init__(self, message: str, candidates: list | None = None):
        super().__init__(message)
        self.candidates = candidates or []


class RankDeficiencyError(SubriftError):
    pass


class CutLocusError(SubriftError):
    pass


class SingularJ1Error(SubriftError):
    pass


class CholeskyError(SubriftError):
    pass


class NotRiemannianError(SubriftError):
    pass


class InconclusiveError(SubriftError):
    pass


class ZeroAcceptanceError(InconclusiveError):
    pass


class ConfigError(SubriftError):
    pass
