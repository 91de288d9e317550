"""Decentralised multi-robot Q-learning with spatial intention maps on 2D grids."""

__version__ = "0.1.0"
