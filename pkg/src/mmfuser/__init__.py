"""Multi-layer visual feature fusion: a gated cross-attention fuser, naive
fusion baselines, and a desk-scale experiment harness on synthetic scenes."""

__version__ = "0.1.0"
