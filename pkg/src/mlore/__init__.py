"""Mixture of low-rank experts for multi-task dense prediction, on a small numpy autodiff core."""

from .config import ModelConfig, paper_config, smoke_config, toy_config
from .decoder import Decoder, MLoREModule
from .reparam import fused_mix, verify_equivalence
from .tensor import GraphError, ShapeError, Tensor

__version__ = "0.1.0"

__all__ = [
    "Decoder",
    "GraphError",
    "MLoREModule",
    "ModelConfig",
    "ShapeError",
    "Tensor",
    "fused_mix",
    "paper_config",
    "smoke_config",
    "toy_config",
    "verify_equivalence",
]
