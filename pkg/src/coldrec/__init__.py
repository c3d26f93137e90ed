"""Pre-training pipeline for cold-start user/item embeddings on bipartite graphs."""

__version__ = "0.1.0"
