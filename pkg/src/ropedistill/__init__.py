"""Position-perturbed self-distillation for RoPE language models."""

__version__ = "0.1.0"
