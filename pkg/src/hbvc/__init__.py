"""Hierarchical bi-directional learned video codec."""

__version__ = "0.1.0"
