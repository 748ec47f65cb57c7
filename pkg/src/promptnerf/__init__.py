"""Prompt-to-NeRF pipeline over an implicit latent space of NeRF parameters."""

__version__ = "0.1.0"
