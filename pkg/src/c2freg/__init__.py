"""Joint affine + deformable 3D registration in one coarse-to-fine pass."""

__version__ = "0.1.0"
