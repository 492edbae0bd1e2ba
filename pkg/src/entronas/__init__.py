"""Training-free, entropy-guided search for CNN-Transformer backbones."""

__version__ = "0.1.0"
