"""Opinion-free blind image quality assessment learned from synthetic data."""

__version__ = "0.1.0"
