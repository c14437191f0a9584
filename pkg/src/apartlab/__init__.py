"""Adversarial-training lab: attacks, a learnable layer-wise generator, and strength-gap diagnostics."""

__version__ = "0.1.0"
