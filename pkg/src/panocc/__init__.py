"""Offset-based panoptic voxel scene completion on synthetic scenes."""

__version__ = "0.1.0"
