"""Steganographic GAN toolkit: embedding, adversarial container generation, steganalysis."""

__version__ = "0.1.0"
