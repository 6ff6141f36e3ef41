"""Homogenization of monotone Dirichlet problems in perforated domains."""

__version__ = "0.1.0"
