"""Weakly supervised pseudo-label generation from a small vision transformer."""

__version__ = "0.1.0"
