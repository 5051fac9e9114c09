"""Image cascade network for real-time segmentation, built from scratch on numpy."""

__version__ = "0.1.0"
