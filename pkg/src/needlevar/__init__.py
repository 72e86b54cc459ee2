"""Needle-variation feedback control for control-affine systems."""

__version__ = "0.1.0"
