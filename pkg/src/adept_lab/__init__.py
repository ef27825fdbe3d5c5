"""Prompt tuning, decomposed prompt tuning and adaptive decomposed prompt tuning on a toy frozen transformer."""

__version__ = "0.1.0"
