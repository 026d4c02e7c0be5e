"""Embedding-arithmetic retrieval engine and benchmark harness."""

__version__ = "0.1.0"
