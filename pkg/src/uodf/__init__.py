"""Orthogonal unsigned distance fields and edge-point reconstruction."""

from .grid import Direction, GridSpec

__version__ = "0.1.0"

__all__ = ["Direction", "GridSpec", "__version__"]
