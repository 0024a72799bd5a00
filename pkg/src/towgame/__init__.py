"""Discounted tug-of-war games and normalized p-Laplace equations with a zeroth-order term."""

__version__ = "0.1.0"
