"""Reverse-mode kernels and optimizers for the conv encoder-decoder."""

from .ops import (
    SELU_ALPHA,
    SELU_LAMBDA,
    activation,
    channel_dropout,
    conv1d_causal,
    conv_transpose1d,
    dense,
    dropout,
    gelu,
    global_avg_pool_masked,
    l1l2_penalty,
    masked_mse,
    relu,
    se_block,
    selu,
    sigmoid,
    softmax,
    weighted_cross_entropy,
)
from .optim import AdamState, CyclicalLr, adam_step, cyclical_lr
from .tensor import Tensor, as_tensor

__all__ = [
    "Tensor",
    "as_tensor",
    "conv1d_causal",
    "conv_transpose1d",
    "dense",
    "activation",
    "relu",
    "selu",
    "gelu",
    "sigmoid",
    "softmax",
    "global_avg_pool_masked",
    "se_block",
    "channel_dropout",
    "dropout",
    "masked_mse",
    "weighted_cross_entropy",
    "l1l2_penalty",
    "AdamState",
    "adam_step",
    "CyclicalLr",
    "cyclical_lr",
    "SELU_LAMBDA",
    "SELU_ALPHA",
]
