"""Choroid segmentation, en-face shadow removal and vessel density for OCT volumes."""

__version__ = "0.1.0"
