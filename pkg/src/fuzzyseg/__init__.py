"""Fuzzy fully convolutional segmentation with an anatomy-aware dense CRF."""

__version__ = "0.1.0"
