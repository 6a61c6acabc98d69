"""Exception types shared across cellkit modules."""

from __future__ import annotations


class CellKitError(Exception):
    """Base class for all cellkit errors."""


class ShapeMismatch(CellKitError):
    """Arrays that must share dimensions do not."""


class EmptyInput(CellKitError):
    """An input with zero height or width was supplied."""


class DegenerateGeometry(CellKitError):
    """Slide geometry violates its invariants (tile/overlap/patch/mpp)."""


class DegenerateScale(CellKitError):
    """A resampling scale produced an empty output."""


class DegenerateFOV(CellKitError):
    """A field-of-view rectangle is empty or outside the tile."""
