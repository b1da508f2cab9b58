"""Hierarchical Bayesian models of temperature-sensitive energy demand."""

__version__ = "0.1.0"
