"""Clustering in the latent space of a GAN with a discrete-continuous prior."""

__version__ = "0.1.0"
