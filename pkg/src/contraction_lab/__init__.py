"""Wasserstein contraction laboratory for SDEs on R^d."""

__version__ = "0.1.0"
