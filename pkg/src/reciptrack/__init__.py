"""Anchor-free siamese tracking head with reciprocal classification/regression losses."""

__version__ = "0.1.0"
