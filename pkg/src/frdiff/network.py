"""Toy score networks: a constant-resolution U-Net-style residual stack and a small DiT."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np

from . import nn
from .blocks import (
    Block,
    Conditioning,
    DiTAttentionBlock,
    DiTFeedForwardBlock,
    ResNetBlock,
    SpatialTransformerBlock,
    _conv,
    _init,
    _rows_to_tokens,
)
from .data import N_CLASSES
from .tensor import Tensor, broadcast_to, matmul, reshape

ARCHS = ("toy_unet", "toy_dit")
TIME_DIM = 64

# (block, x, cond) -> y ; lets samplers intercept each residual block
BlockRunner = Callable[[Block, Tensor, Conditioning], Tensor]


@dataclass
class ScoreNetwork:
    """``eps_theta(x_t, t, c)`` with blocks addressable by 1-based layer index.

    Labels equal to ``n_classes`` select the learned null condition used for
    the unconditional branch of classifier-free guidance.
    """

    arch: str
    width: int
    depth: int
    image_shape: tuple[int, int, int]
    blocks: list[Block]
    params: dict[str, Tensor]
    seed: int = 0
    n_classes: int = N_CLASSES
    patch: int = 1
    config: dict = field(default_factory=dict)

    @property
    def n_layers(self) -> int:
        return len(self.blocks)

    @property
    def null_label(self) -> int:
        return self.n_classes

    def block(self, i: int) -> Block:
        """Block by 1-based layer index."""
        if not 1 <= i <= len(self.blocks):
            raise IndexError(f"layer index {i} outside [1, {len(self.blocks)}]")
        return self.blocks[i - 1]

    def with_params(self, params: Mapping[str, Tensor]) -> "ScoreNetwork":
        return ScoreNetwork(
            self.arch, self.width, self.depth, self.image_shape, self.blocks, dict(params),
            self.seed, self.n_classes, self.patch, dict(self.config),
        )

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def conditioning(self, t, labels) -> Conditioning:
        t = np.asarray(t, dtype=np.float64).reshape(-1)
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        if len(t) != len(labels):
            t = np.broadcast_to(t, labels.shape)
        dtype = self.params["time.w1"].dtype
        P = self.params
        temb = Tensor(nn.sinusoidal_embedding(t, TIME_DIM).astype(dtype))
        emb = nn.linear(nn.silu(nn.linear(temb, P["time.w1"], P["time.b1"])), P["time.w2"], P["time.b2"])
        onehot = Tensor(np.eye(self.n_classes + 1, dtype=dtype)[labels])
        emb = emb + matmul(onehot, P["label.emb"])
        context = reshape(matmul(onehot, P["label.ctx"]), (len(labels), 1, self.width))
        return Conditioning(emb, context, t)

    def __call__(self, x, t, labels, runner: Optional[BlockRunner] = None) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
        cond = self.conditioning(t, labels)
        h = self.stem(x)
        for blk in self.blocks:
            h = runner(blk, h, cond) if runner is not None else blk.forward(self.params, h, cond)
        return self.head(h, cond)

    def stem(self, x: Tensor) -> Tensor:
        P = self.params
        if self.arch == "toy_unet":
            return _conv(x, P["stem.w"], P["stem.b"])
        tokens = nn.linear(nn.patchify(x, self.patch), P["stem.w"], P["stem.b"])
        return tokens + broadcast_to(P["pos"], tokens.shape)

    def head(self, h: Tensor, cond: Conditioning) -> Tensor:
        P = self.params
        c, hh, ww = self.image_shape
        if self.arch == "toy_unet":
            h = nn.silu(nn.groupnorm(h, self.blocks[0].groups, P["head.gn.g"], P["head.gn.b"]))
            return _conv(h, P["head.w"], P["head.b"])
        e = nn.silu(cond.emb)
        shift = nn.linear(e, P["head.shift.w"], P["head.shift.b"])
        scale = nn.linear(e, P["head.scale.w"], P["head.scale.b"])
        h = nn.layernorm(h)
        h = h * (_rows_to_tokens(scale, h.shape) + 1.0) + _rows_to_tokens(shift, h.shape)
        out = nn.linear(h, P["head.w"], P["head.b"])
        return nn.unpatchify(out, c, hh, ww, self.patch)

    def block_costs(self) -> list[tuple[float, float]]:
        return [blk.cost() for blk in self.blocks]

    def overhead_cost(self) -> float:
        """Per-sample operation count outside the residual blocks."""
        c, h, w = self.image_shape
        d, e = self.width, self.width
        emb = TIME_DIM * e + e * e + 2 * e * (self.n_classes + 1)
        if self.arch == "toy_unet":
            return float(emb + 2 * 9 * c * d * h * w + 6 * d * h * w)
        n = (h // self.patch) * (w // self.patch)
        cp = c * self.patch * self.patch
        return float(emb + 2 * n * cp * d + 2 * e * d + 8 * n * d)

    def full_cost(self) -> float:
        return self.overhead_cost() + sum(s + f for s, f in self.block_costs())


def _groups(width: int) -> int:
    return math.gcd(width, 8)


def build_toy_network(
    arch: str = "toy_unet",
    width: int = 32,
    depth: int = 4,
    seed: int = 0,
    image_shape: tuple[int, int, int] = (1, 8, 8),
    n_classes: int = N_CLASSES,
    dtype=np.float64,
) -> ScoreNetwork:
    """Randomly initialised toy network.

    ``toy_unet`` alternates ResNet and spatial-transformer blocks;
    ``toy_dit`` alternates adaLN attention and feed-forward blocks.
    ``depth`` is the number of residual blocks in both cases.
    """
    if arch not in ARCHS:
        raise ValueError(f"unknown architecture {arch!r}; choose from {ARCHS}")
    if width < 1 or depth < 1:
        raise ValueError("width and depth must be positive")
    rng = np.random.default_rng(seed)
    c, h, w = image_shape
    e = width
    params: dict[str, np.ndarray] = {
        "time.w1": _init(rng, TIME_DIM, (TIME_DIM, e)),
        "time.b1": np.zeros(e),
        "time.w2": _init(rng, e, (e, e)),
        "time.b2": np.zeros(e),
        "label.emb": rng.standard_normal((n_classes + 1, e)) * 0.5,
        "label.ctx": rng.standard_normal((n_classes + 1, width)),
    }
    blocks: list[Block] = []
    if arch == "toy_unet":
        patch = 1
        spatial = (h, w)
        kinds = [ResNetBlock, SpatialTransformerBlock]
        params.update(
            {
                "stem.w": _init(rng, 9 * c, (width, c, 3, 3)),
                "stem.b": np.zeros(width),
                "head.gn.g": np.ones(width),
                "head.gn.b": np.zeros(width),
                "head.w": _init(rng, 9 * width, (c, width, 3, 3)),
                "head.b": np.zeros(c),
            }
        )
    else:
        patch = 2 if h % 2 == 0 and w % 2 == 0 and h > 1 else 1
        spatial = (h // patch, w // patch)
        n, cp = spatial[0] * spatial[1], c * patch * patch
        kinds = [DiTAttentionBlock, DiTFeedForwardBlock]
        params.update(
            {
                "stem.w": _init(rng, cp, (cp, width)),
                "stem.b": np.zeros(width),
                "pos": rng.standard_normal((n, width)) * 0.1,
                "head.shift.w": _init(rng, e, (e, width)),
                "head.shift.b": np.zeros(width),
                "head.scale.w": _init(rng, e, (e, width)),
                "head.scale.b": np.zeros(width),
                "head.w": _init(rng, width, (width, cp)),
                "head.b": np.zeros(cp),
            }
        )
    for i in range(1, depth + 1):
        blk = kinds[(i - 1) % 2](i, width, e, spatial, _groups(width))
        params.update(blk.init_params(rng))
        blocks.append(blk)
    config = {"arch": arch, "width": width, "depth": depth, "seed": seed,
              "image_shape": list(image_shape), "n_classes": n_classes}
    tensors = {k: Tensor(np.asarray(v, dtype=dtype)) for k, v in params.items()}
    return ScoreNetwork(arch, width, depth, tuple(image_shape), blocks, tensors, seed, n_classes, patch, config)


def network_from_checkpoint(params: Mapping[str, np.ndarray], config: Mapping, dtype=np.float64) -> ScoreNetwork:
    net = build_toy_network(
        config["arch"], config["width"], config["depth"], config.get("seed", 0),
        tuple(config["image_shape"]), config.get("n_classes", N_CLASSES), dtype,
    )
    missing = set(net.params) - set(params)
    if missing:
        raise ValueError(f"checkpoint lacks tensors: {sorted(missing)[:5]}")
    return net.with_params({k: Tensor(np.asarray(params[k], dtype=dtype)) for k in net.params})
