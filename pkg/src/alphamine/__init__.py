"""Hierarchical genetic mining of diverse formulaic alpha factors."""

__version__ = "0.1.0"
