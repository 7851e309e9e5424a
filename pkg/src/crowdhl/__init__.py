"""Audience-based sport highlight detection with a from-scratch 3D CNN."""

from .errors import BoundsError, FormatError, HighlightError, NumericError, ShapeError, UsageError

__version__ = "0.1.0"

__all__ = [
    "BoundsError",
    "FormatError",
    "HighlightError",
    "NumericError",
    "ShapeError",
    "UsageError",
]
