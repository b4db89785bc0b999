"""Adversarial camouflage textures against object detectors, trained through a neural renderer."""

__version__ = "0.1.0"
