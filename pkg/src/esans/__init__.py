"""Semantic-aware negative sampling for two-tower retrieval."""

__version__ = "0.1.0"
