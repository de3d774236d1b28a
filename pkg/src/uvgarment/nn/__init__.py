from . import autodiff, checkpoint, layers, optim
from .autodiff import Value, no_grad
from .layers import Conv2d, GroupNorm, Linear, Mlp, Parameter, SelfAttention, fourier_encode
from .optim import Adam, AdamState, adam_step

__all__ = [
    "autodiff", "checkpoint", "layers", "optim",
    "Value", "no_grad",
    "Conv2d", "GroupNorm", "Linear", "Mlp", "Parameter", "SelfAttention", "fourier_encode",
    "Adam", "AdamState", "adam_step",
]
