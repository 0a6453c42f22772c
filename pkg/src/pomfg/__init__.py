"""Numerical laboratory for partially observed mean field games."""

__version__ = "0.1.0"
