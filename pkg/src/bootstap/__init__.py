"""Self-supervised bootstrapping of a point tracker on synthetic video."""

__version__ = "0.1.0"
