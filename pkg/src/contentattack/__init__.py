"""Adversarial content attack toolkit: diffusion latent mapping and latent-space attacks."""

__version__ = "0.1.0"
