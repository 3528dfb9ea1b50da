"""Exception hierarchy for specpose.

Library code raises these; only the CLI turns them into exit codes.
"""

from typing import Optional


class SpecPoseError(Exception):
    """Base class for every error raised by specpose."""


class ValidationError(SpecPoseError, ValueError):
    """An input violated a documented precondition."""


class GeometryError(ValidationError):
    """Invalid pose, mesh, point set or camera."""


class CodebookError(ValidationError):
    """Out-of-range bin or malformed symmetry specification."""


class RenderError(ValidationError):
    """Mismatched buffers, bad crops or non-manifold meshes."""


class RefineError(ValidationError):
    """Refinement could not start or produced non-finite values."""


class DatasetError(ValidationError):
    """A manifest entry or prediction file failed validation."""

    def __init__(self, message: str, entry_index: Optional[int] = None):
        self.entry_index = entry_index
        if entry_index is not None:
            message = f"entry {entry_index}: {message}"
        super().__init__(message)
