"""Diverse policy discovery via state-distance intrinsic rewards."""
__version__ = "0.1.0"
