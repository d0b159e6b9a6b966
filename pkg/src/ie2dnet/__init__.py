"""Imitating-encoder / enhanced-decoder segmentation."""
