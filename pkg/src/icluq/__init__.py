"""Uncertainty decomposition for in-context learning classification."""

__version__ = "0.1.0"
