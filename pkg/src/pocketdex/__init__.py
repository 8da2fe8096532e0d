"""Dual-tower pocket/molecule embedding, exact retrieval and screening metrics."""

__version__ = "0.1.0"
