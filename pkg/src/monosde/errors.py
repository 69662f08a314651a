"""Exception hierarchy shared by the numerical modules and the CLI."""

from __future__ import annotations

import numpy as np


class MonoSdeError(Exception):
    pass


class ModelEvaluationError(MonoSdeError):
    """A drift/diffusion/derivative evaluation produced non-finite values."""

    def __init__(self, message: str, x=None):
        self.x = None if x is None else np.array(x, dtype=float)
        if x is not None:
            message = f"{message} (at x={np.array2string(np.asarray(x), precision=6)})"
        super().__init__(message)


class PreconditionError(MonoSdeError, ValueError):
    pass


class StepError(MonoSdeError):
    """The implicit step's Newton iteration did not converge."""

    def __init__(self, message: str, step_index: int | None = None):
        self.step_index = step_index
        super().__init__(message)


class DivergenceError(MonoSdeError):
    """A trajectory left the finite range."""

    def __init__(self, message: str, step_index: int | None = None):
        self.step_index = step_index
        super().__init__(message)


class MemoryBudgetError(MonoSdeError):
    pass


class ConfigError(MonoSdeError, ValueError):
    def __init__(self, message: str, key: str | None = None):
        self.key = key
        super().__init__(message)
