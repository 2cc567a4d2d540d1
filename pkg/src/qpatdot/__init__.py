"""Coupled DOT + quantitative photoacoustic inversion on a 2D square domain."""

__version__ = "0.1.0"
