"""Minimal dense-tensor library with reverse-mode differentiation."""

from . import ops
from .params import ParamStore, adamw_step, load_weights, read_weight_file, save_weights
from .tensor import Graph, Tensor, backward, no_grad, precision, set_debug

__all__ = [
    "Graph",
    "ParamStore",
    "Tensor",
    "adamw_step",
    "backward",
    "load_weights",
    "no_grad",
    "ops",
    "precision",
    "read_weight_file",
    "save_weights",
    "set_debug",
]
