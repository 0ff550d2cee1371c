"""Desk-scale RL over a latent flow-matching policy with diversity guidance."""

__version__ = "0.1.0"
