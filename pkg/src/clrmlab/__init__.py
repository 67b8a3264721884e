"""Desk-scale closed-loop reservoir management laboratory."""

__version__ = "0.1.0"
