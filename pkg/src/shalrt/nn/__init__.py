"""Framework-free tensor math, layers, and optimizers."""
from .modules import Embedding, FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, Parameter
from .optim import OptimizerState, optimizer_step
from .tensor import Tensor, no_grad

__all__ = [
    "Embedding", "FeedForward", "LayerNorm", "Linear", "Module", "MultiHeadAttention", "Parameter",
    "OptimizerState", "optimizer_step", "Tensor", "no_grad",
]
