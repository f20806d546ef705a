"""Feature reuse: keyframe schedules, per-layer caches and score mixing.

At a keyframe every block runs in full and its split output ``S_i(x)`` is
stored; at other iterations the stored value replaces ``S_i`` while the
time-conditioned remainder ``f_i`` runs with the current timestep. The
whole-network score of the last keyframe is kept as well, and a hard-sigmoid
schedule ``lambda(n)`` blends it with the reuse score. Where ``lambda`` is 0
the network is not evaluated at all.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .blocks import KINDS, Block, Conditioning
from .network import ScoreNetwork
from .sampling import (
    ConfigurationError,
    SamplerConfig,
    SamplerHooks,
    ScorePair,
    StepInfo,
    Trajectory,
    sample,
)
from .schedule import NoiseSchedule
from .tensor import ContractError, Tensor


@dataclass(frozen=True)
class KeyframeSet:
    """Sorted iteration indices (1-based) at which all layers are recomputed."""

    members: tuple[int, ...]
    N: int
    _lookup: frozenset = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        members = tuple(sorted(set(int(m) for m in self.members)))
        object.__setattr__(self, "members", members)
        object.__setattr__(self, "_lookup", frozenset(members))
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if not members or members[0] != 1:
            raise ValueError("keyframe set must contain iteration 1")
        if members[-1] > self.N:
            raise ValueError(f"keyframe {members[-1]} beyond N={self.N}")

    def __contains__(self, n: int) -> bool:
        return n in self._lookup

    def __len__(self) -> int:
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    def to_list(self) -> list[int]:
        return list(self.members)


def uniform_keyframes(N: int, M: int) -> KeyframeSet:
    """``{1, 1 + M, 1 + 2M, ...}`` up to ``N``."""
    if M < 1:
        raise ValueError(f"FR interval must be >= 1, got {M}")
    return KeyframeSet(tuple(range(1, N + 1, M)), N)


@dataclass(frozen=True)
class MixingSchedule:
    N: int
    tau: float = 30.0
    bias: float = 0.5

    def lam(self, n: int) -> float:
        return lambda_of(n, self)


def lambda_of(n: int, sched: MixingSchedule) -> float:
    """Hard sigmoid ``clip((tau * (n / N - b) + 2) / 4, 0, 1)``."""
    z = sched.tau * (n / sched.N - sched.bias)
    if math.isinf(z):
        return 0.0 if z < 0 else 1.0
    return max(0.0, min(1.0, (z + 2.0) / 4.0))


def mixed_score(eps_fr: Optional[Tensor], E: Tensor, n: int, sched: Optional[MixingSchedule]) -> Tensor:
    lam = 1.0 if sched is None else lambda_of(n, sched)
    if lam == 0.0:
        return E
    if eps_fr is None:
        raise ContractError(f"lambda({n}) = {lam} > 0 but no reuse score was computed")
    if lam == 1.0:
        return eps_fr
    return eps_fr * lam + E * (1.0 - lam)


@dataclass
class ReuseCache:
    M: dict[int, Tensor] = field(default_factory=dict)
    E: Optional[ScorePair] = None
    last_keyframe: Optional[int] = None


def reuse_forward(block: Block, params, x: Tensor, cond: Conditioning, n: int,
                  cache: ReuseCache, keyframes: KeyframeSet) -> Tensor:
    """One residual block under feature reuse at iteration ``n``."""
    if n in keyframes:
        m = block.split(params, x, cond)
        cache.M[block.index] = m
        return block.finish(params, m, x, cond)
    try:
        m = cache.M[block.index]
    except KeyError:
        raise ContractError(f"no cached features for layer {block.index} at iteration {n}") from None
    return block.finish(params, m, x, cond)


class FeatureReuseHooks(SamplerHooks):
    def __init__(self, keyframes: KeyframeSet, mixing: Optional[MixingSchedule] = None,
                 scope: Iterable[str] = KINDS):
        self.keyframes = keyframes
        self.mixing = mixing
        self.scope = frozenset(scope)
        unknown = self.scope - set(KINDS)
        if unknown:
            raise ConfigurationError(f"unknown block kinds in reuse scope: {sorted(unknown)}")
        self.cache = ReuseCache()

    def start(self, net, config, timesteps):
        super().start(net, config, timesteps)
        if self.keyframes.N != len(timesteps):
            raise ConfigurationError(f"keyframe set is for N={self.keyframes.N}, sampler runs {len(timesteps)}")
        self.net = net
        self.cache = ReuseCache()

    def _runner(self, n: int):
        params = self.net.params

        def run(block: Block, x: Tensor, cond: Conditioning) -> Tensor:
            if block.kind not in self.scope:
                return block.forward(params, x, cond)
            return reuse_forward(block, params, x, cond, n, self.cache, self.keyframes)

        return run

    def score(self, n, t, x, evaluate):
        L = self.n_layers
        reusable = sum(1 for b in self.net.blocks if b.kind in self.scope)
        lam = 1.0 if self.mixing is None else lambda_of(n, self.mixing)
        if n in self.keyframes:
            pair = evaluate(self._runner(n))
            self.cache.E = pair
            self.cache.last_keyframe = n
            return pair, StepInfo(True, lam, 1, L, 0)
        E = self.cache.E
        if E is None:
            raise ConfigurationError(f"iteration {n} reuses features before any keyframe")
        if lam == 0.0:
            return E, StepInfo(False, lam, 0, 0, L)
        pair = evaluate(self._runner(n))
        fresh = sum(s for b, (s, _) in zip(self.net.blocks, self.net.block_costs()) if b.kind not in self.scope)
        uncond = None if pair.uncond is None else mixed_score(pair.uncond, E.uncond, n, self.mixing)
        mixed = ScorePair(mixed_score(pair.cond, E.cond, n, self.mixing), uncond)
        return mixed, StepInfo(False, lam, 1, L - reusable, reusable, fresh)


def frdiff_sample(net: ScoreNetwork, config: SamplerConfig, keyframes: KeyframeSet,
                  mixing: Optional[MixingSchedule], schedule: NoiseSchedule,
                  scope: Iterable[str] = KINDS, x_init=None) -> Trajectory:
    """Sample with feature reuse on ``keyframes`` and optional score mixing."""
    return sample(net, config, schedule, FeatureReuseHooks(keyframes, mixing, scope), x_init=x_init)
