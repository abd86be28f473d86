"""Attention-explanation audits for a neural item-based recommender."""

__version__ = "0.1.0"
