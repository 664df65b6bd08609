"""Exception types shared across the package."""

from __future__ import annotations


class MeshError(ValueError):
    """Invalid mesh topology, geometry or boundary sets."""


class MeshFormatError(MeshError):
    def __init__(self, path, line: int, message: str):
        self.path = str(path)
        self.line = line
        super().__init__(f"{self.path}:{line}: {message}")


class NestingError(MeshError):
    """A coarse node has no coordinate-identical counterpart on a finer level."""


class SolverError(RuntimeError):
    pass


class MaterialError(ValueError):
    """Non-SPD elasticity matrix or infeasible dispersion parameters."""


class ExtrapolationError(ValueError):
    """Field evaluation requested outside the reference mesh."""


class InsufficientSamplesError(ValueError):
    pass


class NormalizationError(ZeroDivisionError):
    pass


class FitError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    """Adaptive loop hit its iteration cap; ``report`` holds the partial state."""

    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report


class ConfigError(ValueError):
    pass
