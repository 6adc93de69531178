"""Sparse MoE audio adapter toolkit."""

__version__ = "0.1.0"
