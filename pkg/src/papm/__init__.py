"""Physics-aware proxy models for 2D process systems."""

__version__ = "0.1.0"
