"""Desk-scale flow-matching editor pipeline on a synthetic grid-poster world."""

__version__ = "0.1.0"
