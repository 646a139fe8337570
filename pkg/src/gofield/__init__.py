"""Jointly trained and compressed dynamic radiance fields on dense feature grids."""

__version__ = "0.1.0"
