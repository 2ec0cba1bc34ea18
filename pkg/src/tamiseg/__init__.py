"""Text-guided multi-scale segmentation pipeline on a synthetic lesion benchmark."""

__version__ = "0.1.0"
