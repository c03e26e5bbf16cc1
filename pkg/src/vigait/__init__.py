"""View-conditioned embeddings for multi-view gait recognition."""

__version__ = "0.1.0"
