"""GNSS-aided backtracking initial alignment for low-cost strapdown IMUs."""

__version__ = "0.1.0"
