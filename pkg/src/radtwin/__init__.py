"""Directional indoor path-loss prediction with voxel scene encodings and LOS-masked attention."""

__version__ = "0.1.0"
