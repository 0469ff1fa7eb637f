"""Unsupervised decomposition of image sequences into patterns and Lie-group transformers."""

__version__ = "0.1.0"
