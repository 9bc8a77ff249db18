"""Recurrent aggregation of multimodal embeddings for visual question
answering, built on a small auditable autodiff engine, with a deterministic
synthetic compositional benchmark and the evaluation metrics to go with it.
"""

from . import data, gradcheck, metrics, model, nn, tensor, train
from .model import RamenConfig, RamenModel, RegionSet, forward
from .tensor import Tape, Tensor, backward

__all__ = [
    "data",
    "gradcheck",
    "metrics",
    "model",
    "nn",
    "tensor",
    "train",
    "RamenConfig",
    "RamenModel",
    "RegionSet",
    "forward",
    "Tape",
    "Tensor",
    "backward",
]

__version__ = "0.1.0"
