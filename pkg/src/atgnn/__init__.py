"""Audio tagging graph neural network on a minimal numpy autodiff engine."""

__version__ = "0.1.0"
