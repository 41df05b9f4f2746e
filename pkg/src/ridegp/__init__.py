"""Additive Gaussian process models of ride-sourcing matching and pickup."""

__version__ = "0.1.0"
