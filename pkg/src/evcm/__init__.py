"""Self-supervised contrast maximization for event cameras."""

__version__ = "0.1.0"
