"""Repulsive MMD losses, bounded kernels and spectral normalization for convolutions."""

__version__ = "0.1.0"
