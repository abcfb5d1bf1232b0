"""Lesion segmentation (Deep-UNet) and dual-branch metadata-fused classification."""

__version__ = "0.1.0"
