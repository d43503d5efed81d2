"""Multi-object tracking with temporal query denoising on a synthetic BEV world."""

__version__ = "0.1.0"
