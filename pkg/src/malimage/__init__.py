"""malimage: classify binary executables rendered as grayscale images."""

__version__ = "0.1.0"
