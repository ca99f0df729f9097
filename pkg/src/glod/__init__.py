"""glod: out-of-core level-of-detail engine for 3D Gaussian scenes."""

__version__ = "0.1.0"
