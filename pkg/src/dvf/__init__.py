"""Dual visual filtering (object crops + attention token selection) for fine-grained retrieval."""

__version__ = "0.1.0"
