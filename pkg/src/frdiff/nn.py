"""Layer functions built on :mod:`frdiff.tensor`.

Activations follow the usual ``b x c x h x w`` image layout or the
``b x tokens x dim`` sequence layout. Attention is single-head.
"""
from __future__ import annotations

import math

import numpy as np

from .tensor import (
    DimensionError,
    Tensor,
    broadcast_to,
    matmul,
    normalize,
    reshape,
    sigmoid,
    softmax,
    swap_last,
    tanh,
    transpose,
)

GN_EPS = 1e-5
LN_EPS = 1e-5


def silu(x: Tensor) -> Tensor:
    return x * sigmoid(x)


def gelu(x: Tensor) -> Tensor:
    # tanh approximation
    c = math.sqrt(2.0 / math.pi)
    inner = (x + (x * x * x) * 0.044715) * c
    return (x * 0.5) * (tanh(inner) + 1.0)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis; ``w`` is ``d_in x d_out``."""
    y = matmul(x, w)
    if b is not None:
        y = y + broadcast_to(b, y.shape)
    return y


def mlp(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    return linear(gelu(linear(x, w1, b1)), w2, b2)


def channel_affine(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """Per-channel ``scale * x + shift`` on a ``(b,) c x h x w`` map."""
    c = x.shape[-3]
    view = (c, 1, 1)
    return x * broadcast_to(reshape(scale, view), x.shape) + broadcast_to(reshape(shift, view), x.shape)


def groupnorm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = GN_EPS) -> Tensor:
    batched = x.ndim == 4
    xb = x if batched else reshape(x, (1,) + x.shape)
    b, c, h, w = xb.shape
    if c % groups:
        raise DimensionError(f"{c} channels not divisible into {groups} groups")
    y = reshape(normalize(reshape(xb, (b, groups, c // groups, h, w)), (2, 3, 4), eps), (b, c, h, w))
    y = channel_affine(y, gamma, beta)
    return y if batched else reshape(y, (c, h, w))


def layernorm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = LN_EPS) -> Tensor:
    y = normalize(x, -1, eps)
    if gamma is not None:
        y = y * broadcast_to(gamma, y.shape)
    if beta is not None:
        y = y + broadcast_to(beta, y.shape)
    return y


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    d = q.shape[-1]
    scores = matmul(q, swap_last(k)) * (1.0 / math.sqrt(d))
    return matmul(softmax(scores, -1), v)


def self_attention(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor) -> Tensor:
    return matmul(attention(matmul(x, wq), matmul(x, wk), matmul(x, wv)), wo)


def cross_attention(x: Tensor, context: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor) -> Tensor:
    if x.ndim != context.ndim:
        raise DimensionError(f"context rank {context.ndim} differs from query rank {x.ndim}")
    return matmul(attention(matmul(x, wq), matmul(context, wk), matmul(context, wv)), wo)


def to_tokens(x: Tensor) -> Tensor:
    """``b x c x h x w`` -> ``b x (h w) x c``."""
    b, c, h, w = x.shape
    return transpose(reshape(x, (b, c, h * w)), (0, 2, 1))


def from_tokens(x: Tensor, h: int, w: int) -> Tensor:
    b, n, c = x.shape
    return reshape(transpose(x, (0, 2, 1)), (b, c, h, w))


def patchify(x: Tensor, p: int) -> Tensor:
    """``b x c x h x w`` -> ``b x (h/p w/p) x (c p p)``."""
    b, c, h, w = x.shape
    if h % p or w % p:
        raise DimensionError(f"spatial extents {(h, w)} not divisible by patch {p}")
    y = reshape(x, (b, c, h // p, p, w // p, p))
    y = transpose(y, (0, 2, 4, 1, 3, 5))
    return reshape(y, (b, (h // p) * (w // p), c * p * p))


def unpatchify(x: Tensor, c: int, h: int, w: int, p: int) -> Tensor:
    b = x.shape[0]
    y = reshape(x, (b, h // p, w // p, c, p, p))
    y = transpose(y, (0, 3, 1, 4, 2, 5))
    return reshape(y, (b, c, h, w))


def sinusoidal_embedding(t: np.ndarray, dim: int = 64, max_period: float = 10000.0) -> np.ndarray:
    """Standard transformer-style embedding of (possibly fractional) times."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = t[:, None] * freqs[None]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1)
