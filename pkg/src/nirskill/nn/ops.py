"""Differentiable kernels for the 1D conv encoder-decoder and classifier.

Layout conventions
------------------
Sequences are (batch, time, channels). Convolution weights are
(kernel, c_in, c_out) with the kernel axis oldest-sample-first, and
convolution means cross-correlation with k-1 zeros padded on the left
(causal: output at t sees inputs at t-k+1 .. t only).

`conv_transpose1d` with the same weight array is the exact adjoint of
`conv1d_causal`: <conv(x, w), y> == <x, conv_transpose(y, w)>. Its input
therefore carries w.shape[2] channels and its output w.shape[1] channels.

Masks are (batch, time) arrays in {0, 1} whose valid region is a prefix of
each row (end-padding only). Masked ops ignore padded positions entirely.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .tensor import Tensor, as_tensor, make_op, unbroadcast

__all__ = [
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
    "SELU_LAMBDA",
    "SELU_ALPHA",
]

# Published self-normalizing constants.
SELU_LAMBDA = 1.0507009873554804934193349852946
SELU_ALPHA = 1.6732632423543772848170429916717

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _accum(p: Tensor, g: np.ndarray) -> None:
    if p.requires_grad:
        p.grad += g


# --------------------------------------------------------------------------
# convolutions
# --------------------------------------------------------------------------

def _conv1d_forward(x: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Causal cross-correlation. Returns (output, window matrix for backward)."""
    batch, t, c_in = x.shape
    k, wc_in, c_out = w.shape
    if wc_in != c_in:
        raise ValueError(f"conv1d: x has {c_in} channels, w expects {wc_in}")
    xp = np.pad(x, ((0, 0), (k - 1, 0), (0, 0)))
    win = sliding_window_view(xp, k, axis=1)        # (B, T, Cin, k)
    mat = np.ascontiguousarray(win).reshape(batch * t, c_in * k)
    ker = w.transpose(1, 0, 2).reshape(c_in * k, c_out)
    y = (mat @ ker).reshape(batch, t, c_out)
    return y, mat


def _conv_transpose_forward(y: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Adjoint of `_conv1d_forward` in its first argument (same w)."""
    batch, t, c_out = y.shape
    k, c_in, wc_out = w.shape
    if wc_out != c_out:
        raise ValueError(f"conv_transpose1d: x has {c_out} channels, w expects {wc_out}")
    yp = np.pad(y, ((0, 0), (0, k - 1), (0, 0)))
    win = sliding_window_view(yp, k, axis=1)        # (B, T, Cout, k); win[b,s,o,i] = y[b,s+i,o]
    mat = np.ascontiguousarray(win).reshape(batch * t, c_out * k)
    # out[b,s,c] = sum_{j,o} w[j,c,o] y[b, s+k-1-j, o]; with i = k-1-j this is
    # a contraction against the kernel-reversed weights.
    ker = w[::-1].transpose(2, 0, 1).reshape(c_out * k, c_in)
    out = (mat @ ker).reshape(batch, t, c_in)
    return out, mat


def conv1d_causal(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Stride-1 causal conv: output length equals input length."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    y, mat = _conv1d_forward(x.data, w.data)
    y = y + b.data
    batch, t, c_in = x.data.shape
    k, _, c_out = w.data.shape

    def backward(g):
        gm = g.reshape(batch * t, c_out)
        if w.requires_grad:
            dw = (mat.T @ gm).reshape(c_in, k, c_out).transpose(1, 0, 2)
            w.grad += dw
        if b.requires_grad:
            b.grad += g.sum(axis=(0, 1))
        if x.requires_grad:
            x.grad += _conv_transpose_forward(g, w.data)[0]

    return make_op(y, (x, w, b), backward)


def conv_transpose1d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Stride-1 transposed conv, trimmed to the input length on the causal side.

    With weights w of shape (k, c_in, c_out), input x carries c_out channels
    and the output carries c_in channels, making this the exact adjoint of
    `conv1d_causal` with the same weight array.
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    y, mat = _conv_transpose_forward(x.data, w.data)
    y = y + b.data
    batch, t, c_out = x.data.shape
    k, c_in, _ = w.data.shape

    def backward(g):
        gm = g.reshape(batch * t, c_in)
        if w.requires_grad:
            dw_rev = (mat.T @ gm).reshape(c_out, k, c_in).transpose(1, 2, 0)
            w.grad += dw_rev[::-1]
        if b.requires_grad:
            b.grad += g.sum(axis=(0, 1))
        if x.requires_grad:
            x.grad += _conv1d_forward(g, w.data)[0]

    return make_op(y, (x, w, b), backward)


# --------------------------------------------------------------------------
# dense / activations / softmax
# --------------------------------------------------------------------------

def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map (batch, n_in) @ (n_in, n_out) + (n_out,)."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    y = x.data @ w.data + b.data

    def backward(g):
        if x.requires_grad:
            x.grad += g @ w.data.T
        if w.requires_grad:
            lhs = x.data.reshape(-1, x.data.shape[-1])
            w.grad += lhs.T @ g.reshape(-1, g.shape[-1])
        if b.requires_grad:
            b.grad += g.reshape(-1, g.shape[-1]).sum(axis=0)

    return make_op(y, (x, w, b), backward)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0  # subgradient at 0 is 0

    def backward(g):
        _accum(x, g * pos)

    return make_op(np.where(pos, x.data, 0.0), (x,), backward)


def selu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    neg_branch = SELU_ALPHA * np.expm1(np.minimum(x.data, 0.0))
    y = SELU_LAMBDA * np.where(pos, x.data, neg_branch)

    def backward(g):
        dy = np.where(pos, SELU_LAMBDA, SELU_LAMBDA * (neg_branch + SELU_ALPHA))
        _accum(x, g * dy)

    return make_op(y, (x,), backward)


def gelu(x: Tensor) -> Tensor:
    """Exact-Phi GELU: x * Phi(x)."""
    x = as_tensor(x)
    phi_cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    y = x.data * phi_cdf

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        _accum(x, g * (phi_cdf + x.data * pdf))

    return make_op(y, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    s = np.empty_like(x.data)
    pos = x.data >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    s[~pos] = ex / (1.0 + ex)

    def backward(g):
        _accum(x, g * s * (1.0 - s))

    return make_op(s, (x,), backward)


_ACTIVATIONS = {"relu": relu, "selu": selu, "gelu": gelu, "sigmoid": sigmoid}


def activation(kind: str, x: Tensor) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x)


def softmax(x: Tensor) -> Tensor:
    """Row softmax over the last axis, stabilized by max subtraction."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        _accum(x, y * (g - dot))

    return make_op(y, (x,), backward)


# --------------------------------------------------------------------------
# masked pooling / attention / dropout
# --------------------------------------------------------------------------

def global_avg_pool_masked(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over valid timesteps only: (batch, time, c) -> (batch, c)."""
    x = as_tensor(x)
    m = np.asarray(mask, dtype=np.float64)
    counts = m.sum(axis=1)
    if np.any(counts < 1):
        raise ValueError("global_avg_pool_masked: an example has no valid step")
    scale = (m / counts[:, None])[:, :, None]
    y = (x.data * scale).sum(axis=1)

    def backward(g):
        _accum(x, g[:, None, :] * scale)

    return make_op(y, (x,), backward)


def se_block(
    x: Tensor,
    mask: np.ndarray,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
    act: str = "relu",
) -> Tensor:
    """Squeeze-excitation gate: masked GAP -> c/r bottleneck -> sigmoid gate.

    The per-channel gate in (0, 1) is broadcast over time and multiplies x.
    """
    c = x.data.shape[-1]
    if w1.data.shape[0] != c or w1.data.shape[1] * w2.data.shape[1] == 0:
        raise ValueError("se_block: weight shapes inconsistent with input channels")
    if act not in ("relu", "gelu"):
        raise ValueError(f"se_block activation must be relu or gelu, got {act!r}")
    squeezed = global_avg_pool_masked(x, mask)
    hidden = activation(act, dense(squeezed, w1, b1))
    gate = sigmoid(dense(hidden, w2, b2))
    return x * gate.reshape(-1, 1, c)


def channel_dropout(x: Tensor, rate: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Drop whole channels with probability `rate`; survivors scaled 1/(1-rate)."""
    if not training or rate == 0.0:
        return as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ValueError("channel_dropout rate must be in [0, 1)")
    x = as_tensor(x)
    batch, _, c = x.data.shape
    keep = (rng.random((batch, 1, c)) >= rate) / (1.0 - rate)
    return x * Tensor(keep)


def dropout(x: Tensor, rate: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Elementwise inverted dropout (classifier hidden layer)."""
    if not training or rate == 0.0:
        return as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    x = as_tensor(x)
    keep = (rng.random(x.data.shape) >= rate) / (1.0 - rate)
    return x * Tensor(keep)


# --------------------------------------------------------------------------
# losses / penalties
# --------------------------------------------------------------------------

def masked_mse(pred: Tensor, target: np.ndarray, mask: np.ndarray, window: int = 25) -> Tensor:
    """MSE over entries that are valid AND within the first `window` steps.

    The mean runs over contributing (example, timestep, channel) entries.
    """
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.data.shape != target.shape:
        raise ValueError("masked_mse: pred and target shapes differ")
    m = np.asarray(mask, dtype=np.float64)
    t_len = pred.data.shape[1]
    in_window = (np.arange(t_len) < window).astype(np.float64)
    weights = (m * in_window)[:, :, None]
    denom = weights.sum() * pred.data.shape[2]
    if denom == 0:
        raise ValueError("masked_mse: no contributing position")
    diff = (pred.data - target) * weights
    loss = (diff * diff).sum() / denom

    def backward(g):
        _accum(pred, (2.0 / denom) * diff * g)

    return make_op(np.float64(loss), (pred,), backward)


def weighted_cross_entropy(
    probs: Tensor,
    labels: np.ndarray,
    class_weights: tuple[float, float] = (0.3, 0.7),
) -> Tensor:
    """Class-weighted NLL over probabilities: -sum(w_y log p_y) / sum(w_y).

    `class_weights` is (negative, positive); doubling both leaves the loss
    unchanged because of the normalization.
    """
    probs = as_tensor(probs)
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.shape[0]
    w = np.asarray(class_weights, dtype=np.float64)[labels]
    total_w = w.sum()
    picked = probs.data[np.arange(n), labels]
    loss = -(w * np.log(picked)).sum() / total_w

    def backward(g):
        if probs.requires_grad:
            gp = np.zeros_like(probs.data)
            gp[np.arange(n), labels] = -(w / picked) / total_w * g
            probs.grad += gp

    return make_op(np.float64(loss), (probs,), backward)


def l1l2_penalty(params, l1: float, l2: float) -> Tensor:
    """l1 * sum|w| + l2 * sum w^2 over the given parameter tensors."""
    params = [as_tensor(p) for p in params]
    value = 0.0
    for p in params:
        value += l1 * np.abs(p.data).sum() + l2 * (p.data * p.data).sum()

    def backward(g):
        for p in params:
            if p.requires_grad:
                p.grad += (l1 * np.sign(p.data) + 2.0 * l2 * p.data) * g

    return make_op(np.float64(value), tuple(params), backward)
