"""Style-fused conditional diffusion for padding time-series training domains."""

__version__ = "0.1.0"
