"""Desk-scale multimodal fusion and prompt-guided segmentation pipeline."""

__version__ = "0.1.0"
