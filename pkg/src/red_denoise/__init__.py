"""Residual encoder-decoder denoising of simulated low-dose CT, trained under a joint pixel and perceptual loss."""

__version__ = "0.1.0"
