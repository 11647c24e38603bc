"""Exception types shared across the package."""

from __future__ import annotations


class OtmapError(Exception):
    """Base class for all otmap errors."""


class NonMonotoneAtPoint(OtmapError):
    """A map left the monotone class at a specific point.

    Carries the offending point and, for triangular maps, the coordinate
    whose diagonal partial is non-positive (``coord`` is 1-based); for
    dense maps ``coord`` is None and ``det`` holds the offending
    determinant. ``stage`` is set when raised from a sequential map.
    """

    def __init__(self, point, coord=None, det=None, stage=None):
        self.point = point
        self.coord = coord
        self.det = det
        self.stage = stage
        where = f" in stage {stage}" if stage is not None else ""
        if coord is not None:
            msg = f"map is non-monotone at {point}: d_{coord} S^{coord} <= 0{where}"
        else:
            msg = f"map is non-monotone at {point}: det(J) = {det}{where}"
        super().__init__(msg)


class BracketNotFound(OtmapError):
    """Monotone bracket expansion exceeded the configured search limit."""


class NoConvergence(OtmapError):
    """An iterative solve hit its iteration cap without meeting tolerance."""


class DegenerateBasis(OtmapError):
    """The static consensus factor could not be formed (singular system)."""


class SchemaError(OtmapError):
    """A serialized document violates the map schema.

    ``path`` names the offending location, e.g. ``"stages[2].W[0]"``.
    """

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


class UnsupportedVersion(OtmapError):
    """A serialized document declares a version this build cannot read."""


class StandardizationError(OtmapError):
    """A dataset column cannot be standardized (zero standard deviation)."""
