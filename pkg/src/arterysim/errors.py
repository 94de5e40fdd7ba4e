"""Exception types shared across the package."""

from __future__ import annotations


class ArterySimError(Exception):
    """Base class for all package errors."""


class MeshError(ArterySimError):
    pass


class MeshParseError(MeshError):
    """Malformed mesh file; carries the offending line number."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class PartitionError(ArterySimError):
    pass


class MaterialError(ArterySimError):
    pass


class LocalSolveError(MaterialError):
    """Quadrature-point backward-Euler solve failed to converge."""

    def __init__(self, point_index, message):
        self.point_index = point_index
        super().__init__(f"{message} (flat point index {point_index})")


class AssemblyError(ArterySimError):
    """Invalid element state during assembly, e.g. an inverted element."""

    def __init__(self, message, element=None):
        self.element = element
        if element is not None:
            message = f"element {element}: {message}"
        super().__init__(message)


class FactorizationError(ArterySimError):
    pass


class GmresError(ArterySimError):
    """Iteration budget exhausted; carries the best iterate and history."""

    def __init__(self, message, best_x=None, history=None):
        self.best_x = best_x
        self.history = history
        super().__init__(message)


class NewtonError(ArterySimError):
    """Nonlinear divergence; carries per-iteration diagnostics."""

    def __init__(self, message, diagnostics=None):
        self.diagnostics = diagnostics or {}
        super().__init__(message)


class SchwarzError(ArterySimError):
    pass


class ConfigError(ArterySimError):
    """Invalid run configuration; carries the offending line number."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
