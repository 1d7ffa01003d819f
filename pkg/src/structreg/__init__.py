"""Structure-aware deformable registration of liver volumes."""

__version__ = "0.1.0"
