"""Marginal transfer learning: kernel mean embeddings on the extended input (P_X, x)."""

__version__ = "0.1.0"
