"""Fusion-aware architecture search toolkit."""

__version__ = "0.1.0"
