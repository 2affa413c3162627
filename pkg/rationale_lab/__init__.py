"""Toy-scale laboratory for in-token rationality optimization and its baselines."""

__version__ = "0.1.0"
