"""Fisheye-aware 3D Gaussian splatting on the CPU."""

__version__ = "1.0.0"
