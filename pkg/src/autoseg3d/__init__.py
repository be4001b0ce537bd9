"""Self-configuring 3D segmentation pipeline."""
__version__ = "0.1.0"
