"""Parallel continuous chain-of-thought: a numpy transformer with Jacobi-iterated latent reasoning."""

__version__ = "0.1.0"
