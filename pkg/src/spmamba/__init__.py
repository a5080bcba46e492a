"""Serialized Point Mamba: space-filling-curve serialization, selective state-space
blocks and a sparse-voxel U-Net for point cloud semantic segmentation, in NumPy."""

__version__ = "0.1.0"
