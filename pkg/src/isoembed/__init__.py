"""Constructive isometric-embedding toolkit on desk-scale ball grids."""

__version__ = "0.1.0"
