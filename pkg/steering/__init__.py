"""Density steering by feedback controls of driftless control-affine systems."""

__version__ = "0.1.0"
