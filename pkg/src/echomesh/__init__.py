"""Synthetic echo views, OT deformation labeling, grid fusion and cardiac metrics."""

__version__ = "0.1.0"
