"""Supervised contrastive domain adaptation for slide-level embeddings."""

__version__ = "0.1.0"
