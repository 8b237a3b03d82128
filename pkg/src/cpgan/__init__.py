"""Unsupervised object discovery by adversarial copy-pasting."""

__version__ = "0.1.0"
