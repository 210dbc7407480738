"""Dual-graph POI click-through-rate engine with contrastive disentanglement."""

__version__ = "0.1.0"
