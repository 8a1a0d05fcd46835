"""Desk-scale heatmap-based 3D particle picking pipeline."""

__version__ = "0.1.0"
