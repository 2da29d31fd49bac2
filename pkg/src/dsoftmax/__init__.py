"""Dissected softmax losses, sampled variants and a desk-scale training harness."""

from .losses import ActivationBatch, LossConfig, LossOutput

__version__ = "0.1.0"

__all__ = ["ActivationBatch", "LossConfig", "LossOutput", "__version__"]
