"""Ensemble fusion toolkit for building segmentation on multichannel tiles."""

__version__ = "0.1.0"
