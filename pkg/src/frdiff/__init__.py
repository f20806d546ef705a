"""Training-free diffusion acceleration by per-layer feature reuse."""

__version__ = "0.1.0"
