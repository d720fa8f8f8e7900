"""Post-training vector quantization toolkit for transformer diffusion blocks."""

__version__ = "0.1.0"
