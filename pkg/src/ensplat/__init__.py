"""ensplat: deformable Gaussian-splatting surrogate for ensemble exploration."""

__version__ = "0.1.0"
