"""Exception hierarchy. Every solver error names its module of origin."""

from __future__ import annotations


class MfsmpError(Exception):
    """Base class; ``module`` records which component raised it."""

    module = "mfsmp"

    def __init__(self, message: str, *, module: str | None = None):
        super().__init__(message)
        if module is not None:
            self.module = module


class ConfigurationError(MfsmpError, ValueError):
    pass


class InvalidMeasureError(MfsmpError, ValueError):
    module = "mfcore"


class DegenerateDensityError(MfsmpError, ValueError):
    module = "mfcore"


class DensityUnderflowError(MfsmpError, FloatingPointError):
    module = "mfcore"


class NumericalBlowupError(MfsmpError, FloatingPointError):
    pass


class ContractionFailureError(MfsmpError, RuntimeError):
    module = "mfforward"

    def __init__(self, message: str, history: list[float]):
        super().__init__(message)
        self.history = list(history)


class UnsupportedModeError(MfsmpError, ValueError):
    pass


class RegressionError(MfsmpError, RuntimeError):
    module = "mfadjoint"
