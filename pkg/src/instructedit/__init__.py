"""Instruction-based image editing with rectified and contrastive supervision."""

__version__ = "0.1.0"
