"""Grounded token initialization for vocabulary-extended tiny language models."""

__version__ = "0.1.0"
