"""Generative streamline sampling through an autoencoder latent space."""

__version__ = "0.1.0"
