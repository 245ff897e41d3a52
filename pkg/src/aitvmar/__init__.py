"""Metal artifact reduction for fan-beam CT with a weighted AITV model."""

__version__ = "0.1.0"
