"""Desk-scale sequence-to-sequence laboratory: RNMT+, Transformer, ConvS2S and hybrids on numpy autograd."""

from s2slab.config import ModelConfig, StackConfig, desk_presets, full_presets
from s2slab.models import Seq2Seq, build_model, forward_loss
from s2slab.tensor import Tensor, backward, grad_check

__all__ = [
    "ModelConfig",
    "Seq2Seq",
    "StackConfig",
    "Tensor",
    "backward",
    "build_model",
    "desk_presets",
    "forward_loss",
    "full_presets",
    "grad_check",
]

__version__ = "0.1.0"
