"""Exemplar VAE: a VAE whose latent prior is a Parzen mixture over training exemplars."""

__version__ = "0.1.0"
