"""Patch-by-patch diffusion models with position and global content conditioning."""

__version__ = "0.1.0"
