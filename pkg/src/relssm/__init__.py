"""Latent state-space modeling of interacting objects on graphs."""

__version__ = "0.1.0"
