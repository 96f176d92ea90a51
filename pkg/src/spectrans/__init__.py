"""Optimal spectral transport for one-dimensional non-Hermitian lattices."""

__version__ = "0.1.0"
