"""Residual blocks with an explicit split point.

Every block computes ``y = F(x, t) + x`` and exposes the factorisation
``F(x, t) = f(S(x), t)``:

* :meth:`Block.split` is ``S``, the part that may be cached and reused;
* :meth:`Block.residual` is ``f``, recomputed with the current timestep;
* :meth:`Block.finish` returns ``f(m, t) + x``;
* :meth:`Block.forward` is the same computation written out in one pass,
  kept separate so the factorisation can be checked against it.

ResNet blocks split after GroupNorm -> SiLU -> Conv; spatial-transformer
blocks put everything before the final skip into ``S``. The two DiT
(adaLN) kinds put norm, scale/shift modulation and attention/MLP into ``S``
and recompute only the output gate ``alpha(t)`` in ``f``. Their ``S``
therefore sees the conditioning vector of the step it was computed at.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .tensor import Tensor, broadcast_to, conv2d, reshape

KINDS = ("resnet", "spatial_transformer", "dit_attention", "dit_feedforward")


@dataclass
class Conditioning:
    """Per-evaluation conditioning shared by all blocks.

    ``emb`` is the ``b x e`` time+label vector, ``context`` the
    ``b x 1 x d`` label token used by cross-attention.
    """

    emb: Tensor
    context: Tensor
    t: np.ndarray


def _conv(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    y = conv2d(x, w)
    return y + broadcast_to(reshape(b, (b.shape[0], 1, 1)), y.shape)


def _rows_to_map(v: Tensor, shape) -> Tensor:
    # b x c -> broadcast over b x c x h x w
    return broadcast_to(reshape(v, (v.shape[0], v.shape[1], 1, 1)), shape)


def _rows_to_tokens(v: Tensor, shape) -> Tensor:
    # b x d -> broadcast over b x n x d
    return broadcast_to(reshape(v, (v.shape[0], 1, v.shape[1])), shape)


def _init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    return rng.standard_normal(shape) / np.sqrt(fan_in)


class Block:
    kind: str = ""

    def __init__(self, index: int, width: int, emb_dim: int, spatial: tuple[int, int], groups: int = 8):
        self.index = index
        self.width = width
        self.emb_dim = emb_dim
        self.spatial = spatial
        self.groups = groups
        self.prefix = f"blocks.{index}."

    def __repr__(self) -> str:
        return f"{type(self).__name__}(index={self.index}, width={self.width})"

    def _p(self, params, name: str) -> Tensor:
        return params[self.prefix + name]

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def split(self, params, x: Tensor, cond: Conditioning) -> Tensor:
        raise NotImplementedError

    def residual(self, params, m: Tensor, cond: Conditioning) -> Tensor:
        raise NotImplementedError

    def finish(self, params, m: Tensor, x: Tensor, cond: Conditioning) -> Tensor:
        return self.residual(params, m, cond) + x

    def forward(self, params, x: Tensor, cond: Conditioning) -> Tensor:
        raise NotImplementedError

    def cost(self) -> tuple[float, float]:
        """Approximate per-sample operation counts ``(S, f)``."""
        raise NotImplementedError


class ResNetBlock(Block):
    kind = "resnet"

    def init_params(self, rng):
        c, e = self.width, self.emb_dim
        p = {
            "gn1.g": np.ones(c),
            "gn1.b": np.zeros(c),
            "conv1.w": _init(rng, 9 * c, (c, c, 3, 3)),
            "conv1.b": np.zeros(c),
            "temb.w": _init(rng, e, (e, c)),
            "temb.b": np.zeros(c),
            "gn2.g": np.ones(c),
            "gn2.b": np.zeros(c),
            "conv2.w": _init(rng, 9 * c, (c, c, 3, 3)),
            "conv2.b": np.zeros(c),
        }
        return {self.prefix + k: v for k, v in p.items()}

    def split(self, params, x, cond):
        P = lambda n: self._p(params, n)
        h = nn.groupnorm(x, self.groups, P("gn1.g"), P("gn1.b"))
        return _conv(nn.silu(h), P("conv1.w"), P("conv1.b"))

    def residual(self, params, m, cond):
        P = lambda n: self._p(params, n)
        h = m + _rows_to_map(nn.linear(nn.silu(cond.emb), P("temb.w"), P("temb.b")), m.shape)
        h = nn.groupnorm(h, self.groups, P("gn2.g"), P("gn2.b"))
        return _conv(nn.silu(h), P("conv2.w"), P("conv2.b"))

    def forward(self, params, x, cond):
        P = lambda n: self._p(params, n)
        h = nn.groupnorm(x, self.groups, P("gn1.g"), P("gn1.b"))
        h = _conv(nn.silu(h), P("conv1.w"), P("conv1.b"))
        h = h + _rows_to_map(nn.linear(nn.silu(cond.emb), P("temb.w"), P("temb.b")), h.shape)
        h = nn.groupnorm(h, self.groups, P("gn2.g"), P("gn2.b"))
        h = _conv(nn.silu(h), P("conv2.w"), P("conv2.b"))
        return h + x

    def cost(self):
        c, hw = self.width, self.spatial[0] * self.spatial[1]
        norm = 6 * c * hw
        conv = 9 * c * c * hw
        return float(norm + conv), float(self.emb_dim * c + c * hw + norm + conv + c * hw)


class SpatialTransformerBlock(Block):
    kind = "spatial_transformer"
    ff_mult = 2

    def init_params(self, rng):
        c, hdim = self.width, self.ff_mult * self.width
        p = {"gn.g": np.ones(c), "gn.b": np.zeros(c), "proj_in.w": _init(rng, c, (c, c)), "proj_in.b": np.zeros(c)}
        for ln in ("ln1", "ln2", "ln3"):
            p[f"{ln}.g"], p[f"{ln}.b"] = np.ones(c), np.zeros(c)
        for att in ("attn1", "attn2"):
            for w in "qkvo":
                p[f"{att}.{w}"] = _init(rng, c, (c, c))
        p.update(
            {
                "ff.w1": _init(rng, c, (c, hdim)),
                "ff.b1": np.zeros(hdim),
                "ff.w2": _init(rng, hdim, (hdim, c)),
                "ff.b2": np.zeros(c),
                "proj_out.w": _init(rng, c, (c, c)),
                "proj_out.b": np.zeros(c),
            }
        )
        return {self.prefix + k: v for k, v in p.items()}

    def _body(self, params, x, cond):
        P = lambda n: self._p(params, n)
        h, w = x.shape[-2:]
        x1 = nn.linear(nn.to_tokens(nn.groupnorm(x, self.groups, P("gn.g"), P("gn.b"))), P("proj_in.w"), P("proj_in.b"))
        a = nn.layernorm(x1, P("ln1.g"), P("ln1.b"))
        x2 = nn.self_attention(a, P("attn1.q"), P("attn1.k"), P("attn1.v"), P("attn1.o")) + x1
        a = nn.layernorm(x2, P("ln2.g"), P("ln2.b"))
        x3 = nn.cross_attention(a, cond.context, P("attn2.q"), P("attn2.k"), P("attn2.v"), P("attn2.o")) + x2
        a = nn.layernorm(x3, P("ln3.g"), P("ln3.b"))
        x4 = nn.mlp(a, P("ff.w1"), P("ff.b1"), P("ff.w2"), P("ff.b2")) + x3
        x4 = nn.linear(x4, P("proj_out.w"), P("proj_out.b"))
        return nn.from_tokens(x4, h, w)

    def split(self, params, x, cond):
        return self._body(params, x, cond)

    def residual(self, params, m, cond):
        # no time input: f is the identity on the cached features
        return m

    def forward(self, params, x, cond):
        return self._body(params, x, cond) + x

    def cost(self):
        c, n = self.width, self.spatial[0] * self.spatial[1]
        norms = 4 * 6 * c * n
        proj = 2 * n * c * c
        self_attn = 4 * n * c * c + 2 * n * n * c
        cross = 2 * n * c * c + 2 * c * c + 2 * n * c
        ff = 2 * n * c * self.ff_mult * c
        return float(norms + proj + self_attn + cross + ff), float(c * n)


class _DiTBlock(Block):
    """adaLN-Zero residual block on a ``b x tokens x d`` sequence."""

    def _ada(self, rng, p):
        d, e = self.width, self.emb_dim
        for name in ("gamma", "beta", "alpha"):
            p[f"ada_{name}.w"] = _init(rng, e, (e, d))
            p[f"ada_{name}.b"] = np.zeros(d)

    def _modulated(self, params, x, cond):
        P = lambda n: self._p(params, n)
        e = nn.silu(cond.emb)
        gamma = nn.linear(e, P("ada_gamma.w"), P("ada_gamma.b"))
        beta = nn.linear(e, P("ada_beta.w"), P("ada_beta.b"))
        h = nn.layernorm(x)
        return h * (_rows_to_tokens(gamma, h.shape) + 1.0) + _rows_to_tokens(beta, h.shape)

    def _inner(self, params, h):
        raise NotImplementedError

    def split(self, params, x, cond):
        return self._inner(params, self._modulated(params, x, cond))

    def residual(self, params, m, cond):
        alpha = nn.linear(nn.silu(cond.emb), self._p(params, "ada_alpha.w"), self._p(params, "ada_alpha.b"))
        return _rows_to_tokens(alpha, m.shape) * m

    def forward(self, params, x, cond):
        P = lambda n: self._p(params, n)
        e = nn.silu(cond.emb)
        gamma = nn.linear(e, P("ada_gamma.w"), P("ada_gamma.b"))
        beta = nn.linear(e, P("ada_beta.w"), P("ada_beta.b"))
        h = nn.layernorm(x)
        h = h * (_rows_to_tokens(gamma, h.shape) + 1.0) + _rows_to_tokens(beta, h.shape)
        h = self._inner(params, h)
        alpha = nn.linear(nn.silu(cond.emb), P("ada_alpha.w"), P("ada_alpha.b"))
        return _rows_to_tokens(alpha, h.shape) * h + x

    def _ada_cost(self):
        d, n = self.width, self.spatial[0] * self.spatial[1]
        return 2 * self.emb_dim * d + 6 * d * n + 2 * d * n, self.emb_dim * d + 2 * d * n


class DiTAttentionBlock(_DiTBlock):
    kind = "dit_attention"

    def init_params(self, rng):
        d = self.width
        p = {f"attn.{w}": _init(rng, d, (d, d)) for w in "qkvo"}
        self._ada(rng, p)
        return {self.prefix + k: v for k, v in p.items()}

    def _inner(self, params, h):
        P = lambda n: self._p(params, n)
        return nn.self_attention(h, P("attn.q"), P("attn.k"), P("attn.v"), P("attn.o"))

    def cost(self):
        d, n = self.width, self.spatial[0] * self.spatial[1]
        s_ada, f_ada = self._ada_cost()
        return float(s_ada + 4 * n * d * d + 2 * n * n * d), float(f_ada)


class DiTFeedForwardBlock(_DiTBlock):
    kind = "dit_feedforward"
    ff_mult = 4

    def init_params(self, rng):
        d, hdim = self.width, self.ff_mult * self.width
        p = {
            "mlp.w1": _init(rng, d, (d, hdim)),
            "mlp.b1": np.zeros(hdim),
            "mlp.w2": _init(rng, hdim, (hdim, d)),
            "mlp.b2": np.zeros(d),
        }
        self._ada(rng, p)
        return {self.prefix + k: v for k, v in p.items()}

    def _inner(self, params, h):
        P = lambda n: self._p(params, n)
        return nn.mlp(h, P("mlp.w1"), P("mlp.b1"), P("mlp.w2"), P("mlp.b2"))

    def cost(self):
        d, n = self.width, self.spatial[0] * self.spatial[1]
        s_ada, f_ada = self._ada_cost()
        return float(s_ada + 2 * n * d * self.ff_mult * d), float(f_ada)


BLOCK_TYPES = {
    cls.kind: cls for cls in (ResNetBlock, SpatialTransformerBlock, DiTAttentionBlock, DiTFeedForwardBlock)
}
