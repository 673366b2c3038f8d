"""Exception types shared across the toolkit."""


class RigfitError(Exception):
    """Base class for all rigfit errors."""


class DimensionMismatchError(RigfitError):
    """Parameter or observation dimensions do not match the rig/model."""


class BehindCameraError(RigfitError):
    """A 3D point lies at or behind the camera plane (z <= z_min)."""


class DegenerateInputError(RigfitError):
    """Input is degenerate for the requested computation (collinear,
    coincident, or otherwise rank-deficient)."""


class TriangulationError(RigfitError):
    """Triangulation could not produce a point (no consensus, etc.)."""


class DegenerateGeometryError(TriangulationError):
    """View geometry is degenerate (parallel rays / coincident centers)."""


class UnderConstrainedError(RigfitError):
    """Too few usable observations to run a fit."""


class NumericError(RigfitError):
    """A numeric computation produced non-finite values."""


class SchemaError(RigfitError):
    """A document does not conform to its file schema."""

    def __init__(self, message, field=None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field
