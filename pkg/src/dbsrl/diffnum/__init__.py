"""Reverse-mode numerics used by every trainable component."""

from .adam import Adam, AdamState, adam_update, global_norm
from .gaussian import GaussianDiag, gaussian_kl, gaussian_log_prob, gaussian_sample_reparam
from .nn import MLP, GRUCell, LSTMCell, Module, make_cell, recurrent_step
from .tensor import (
    ContractError,
    DimensionError,
    NumericError,
    Tape,
    Tensor,
    clip,
    concat,
    exp,
    expm1,
    forward_affine,
    log,
    matmul,
    relu,
    reshape,
    sigmoid,
    square,
    stack,
    tanh,
    tmean,
    tsum,
)

__all__ = [
    "Adam",
    "AdamState",
    "ContractError",
    "DimensionError",
    "GRUCell",
    "GaussianDiag",
    "LSTMCell",
    "MLP",
    "Module",
    "NumericError",
    "Tape",
    "Tensor",
    "adam_update",
    "clip",
    "concat",
    "exp",
    "expm1",
    "forward_affine",
    "gaussian_kl",
    "gaussian_log_prob",
    "gaussian_sample_reparam",
    "global_norm",
    "log",
    "make_cell",
    "matmul",
    "recurrent_step",
    "relu",
    "reshape",
    "sigmoid",
    "square",
    "stack",
    "tanh",
    "tmean",
    "tsum",
]
