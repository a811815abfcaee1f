"""Longitudinal brain-image simulation with slice-wise conditional adversarial autoencoders."""

__version__ = "0.1.0"
