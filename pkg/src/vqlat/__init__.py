"""Token-level vector-quantized sequence autoencoder and latent-space toolkit."""

__version__ = "0.1.0"
