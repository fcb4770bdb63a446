"""Hand-region quality assessment for generated images."""

__version__ = "0.1.0"
