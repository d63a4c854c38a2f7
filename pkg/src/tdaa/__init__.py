"""Targeted downstream-agnostic adversarial examples against frozen pre-trained encoders."""

__version__ = "0.1.0"
