"""Desk-scale laboratory for training tiny diffusion models on synthetic
concept data, erasing individual concepts by guided fine-tuning, and
measuring what the edit did."""

__version__ = "0.1.0"
