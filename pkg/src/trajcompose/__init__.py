"""Compositional trajectory diffusion policies on a planar tool-use benchmark."""

__version__ = "0.1.0"
