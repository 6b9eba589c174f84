"""Numerical sub-Riemannian geodesics, second variation and bridge fluctuations."""

__version__ = "0.1.0"
