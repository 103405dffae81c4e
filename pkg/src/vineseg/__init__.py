"""Vineyard segmentation toolkit for multispectral imagery."""

__version__ = "0.1.0"
