"""Region-level self-supervised pre-training on synthetic phantoms."""

__version__ = "0.1.0"
