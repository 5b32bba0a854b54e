"""Two-stream 3D convolutional micro-framework for sport gesture recognition."""

__version__ = "0.1.0"
