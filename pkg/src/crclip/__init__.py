"""Small-scale contrastive video-text retrieval with cross-modal refinement."""

__version__ = "0.1.0"
