"""Sparse-voxel sequence backbone: curve serialization, selective scans,
dual-scale blocks, BEV scatter, and the analysis harness around them."""

__version__ = "0.1.0"
