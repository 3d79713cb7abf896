"""Multi-frame in-loop filtering for compressed video."""

__version__ = "0.1.0"
