"""Self-supervised color/texture representation learning with compatibility,
fill-in-the-blank, retrieval, and kNN evaluation protocols."""

__version__ = "0.1.0"
