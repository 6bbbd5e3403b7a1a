"""Guided thermal super-resolution on Laplacian pyramids."""
__version__ = "0.1.0"
