"""Cascade occluded-attention transformer for person search, at toy scale."""

__version__ = "0.1.0"
