"""Spatial transfer learning with a learned Latent Dependency Factor (LDF)."""

__version__ = "0.1.0"
