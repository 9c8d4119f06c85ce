"""Score, fuse and select among several video object segmentation models."""

__version__ = "0.1.0"
