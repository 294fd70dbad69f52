"""Numerics: cameras, Gaussians, the fisheye warp, rasterization, training and evaluation."""
