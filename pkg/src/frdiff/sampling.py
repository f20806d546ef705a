"""Trajectory sampling with per-step hooks.

The sampler owns the solver loop; a :class:`SamplerHooks` object decides how
the score at each iteration is obtained (full evaluation, feature reuse,
stored score, gated mixtures). Iterations are numbered ``n = 1..N`` from
noisiest to cleanest; ``timesteps[n - 1]`` is the diffusion time visited.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from .io import write_csv
from .network import BlockRunner, ScoreNetwork
from .schedule import NoiseSchedule, cfg_combine, ddim_step, ddpm_step
from .tensor import Tensor, concat

SOLVERS = ("ddim", "ddpm")


class ConfigurationError(ValueError):
    """Sampler or hook was asked to do something its state cannot support."""


@dataclass
class SamplerConfig:
    steps: int = 50
    solver: str = "ddim"
    guidance_weight: float = 0.0
    seed: int = 0
    label: Optional[int] = None
    batch: int = 1
    timesteps: Optional[Sequence[int]] = None

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigurationError("steps must be >= 1")
        if self.solver not in SOLVERS:
            raise ConfigurationError(f"unknown solver {self.solver!r}")
        if self.guidance_weight < 0:
            raise ConfigurationError("guidance weight must be >= 0")
        if self.timesteps is not None and len(self.timesteps) != self.steps:
            raise ConfigurationError("explicit timesteps must have one entry per step")

    @property
    def guided(self) -> bool:
        return self.label is not None and self.guidance_weight != 0


class ScorePair(NamedTuple):
    cond: Tensor
    uncond: Optional[Tensor]


@dataclass
class StepInfo:
    is_keyframe: bool = True
    lam: float = 1.0
    network_evals: int = 1
    s_ops_executed: int = 0
    s_ops_skipped: int = 0
    s_cost: Optional[float] = None  # exact S-op count when not all layers are alike


@dataclass
class StepRecord:
    iteration: int
    t: int
    t_prev: int
    is_keyframe: bool
    lam: float
    network_evals: int
    s_ops_executed: int
    s_ops_skipped: int
    ops: float
    wallclock_ms: float


LEDGER_HEADER = ["iteration", "is_keyframe", "lambda", "network_evals", "s_ops_executed",
                 "s_ops_skipped", "wallclock_ms"]


@dataclass
class Trajectory:
    states: list[np.ndarray]
    timesteps: np.ndarray
    ledger: list[StepRecord]
    wallclock_s: float
    final: Tensor = field(repr=False, default=None)

    @property
    def sample(self) -> np.ndarray:
        return self.states[-1]

    @property
    def network_evals(self) -> int:
        return sum(r.network_evals for r in self.ledger)

    @property
    def ops(self) -> float:
        return sum(r.ops for r in self.ledger)

    def write_ledger(self, path: str | Path) -> Path:
        rows = ((r.iteration, r.is_keyframe, r.lam, r.network_evals, r.s_ops_executed,
                 r.s_ops_skipped, r.wallclock_ms) for r in self.ledger)
        return write_csv(path, LEDGER_HEADER, rows)


Evaluate = Callable[..., ScorePair]


class SamplerHooks:
    """Default behaviour: evaluate the full network at every iteration."""

    n_layers: int = 0

    def start(self, net: ScoreNetwork, config: SamplerConfig, timesteps: np.ndarray) -> None:
        self.n_layers = net.n_layers

    def score(self, n: int, t: int, x: Tensor, evaluate: Evaluate) -> tuple[ScorePair, StepInfo]:
        return evaluate(), StepInfo(True, 1.0, 1, self.n_layers, 0)


def make_evaluator(net: ScoreNetwork, config: SamplerConfig, x: Tensor, t: int) -> Evaluate:
    """Closure computing cond/uncond scores at ``(x, t)``; CFG branches share one batch."""
    b = x.shape[0]
    label = net.null_label if config.label is None else config.label

    def evaluate(runner: Optional[BlockRunner] = None) -> ScorePair:
        if config.guided:
            labels = np.concatenate([np.full(b, label), np.full(b, net.null_label)])
            out = net(concat([x, x], 0), np.full(2 * b, t), labels, runner)
            return ScorePair(out[:b], out[b:])
        return ScorePair(net(x, np.full(b, t), np.full(b, label), runner), None)

    return evaluate


def combine(pair: ScorePair, w: float):
    return pair.cond if pair.uncond is None else cfg_combine(pair.cond, pair.uncond, w)


def initial_noise(net: ScoreNetwork, config: SamplerConfig) -> np.ndarray:
    rng = np.random.default_rng(config.seed)
    dtype = net.params["time.w1"].dtype
    return rng.standard_normal((config.batch,) + tuple(net.image_shape)).astype(dtype)


def sample(
    net: ScoreNetwork,
    config: SamplerConfig,
    schedule: NoiseSchedule,
    hooks: Optional[SamplerHooks] = None,
    x_init: Optional[np.ndarray | Tensor] = None,
) -> Trajectory:
    hooks = hooks or SamplerHooks()
    ts = np.asarray(config.timesteps if config.timesteps is not None else schedule.timesteps(config.steps))
    if np.any(np.diff(ts) >= 0) or ts[-1] < 1 or ts[0] > schedule.T:
        raise ConfigurationError("timesteps must be strictly decreasing within [1, T]")
    x = x_init if x_init is not None else initial_noise(net, config)
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
    noise_rng = np.random.default_rng([config.seed, 1])
    rows = x.shape[0] * (2 if config.guided else 1)
    s_total = sum(s for s, _ in net.block_costs())
    eval_cost = net.overhead_cost() + sum(f for _, f in net.block_costs())
    hooks.start(net, config, ts)
    states = [x.data]
    ledger = []
    t_start = time.perf_counter()
    for n, t in enumerate(ts, start=1):
        t = int(t)
        t_prev = int(ts[n]) if n < len(ts) else 0
        tic = time.perf_counter()
        pair, info = hooks.score(n, t, x, make_evaluator(net, config, x, t))
        eps = combine(pair, config.guidance_weight)
        if config.solver == "ddim":
            x = ddim_step(x, eps, t, t_prev, schedule)
        else:
            z = noise_rng.standard_normal(x.shape).astype(x.dtype) if t_prev > 0 else np.zeros(x.shape, x.dtype)
            x = ddpm_step(x, eps, t, t_prev, schedule, Tensor(z))
        s_ops = info.s_cost if info.s_cost is not None else s_total * info.s_ops_executed / net.n_layers
        ops = rows * (info.network_evals * eval_cost + s_ops)
        ledger.append(StepRecord(n, t, t_prev, info.is_keyframe, info.lam, info.network_evals,
                                 info.s_ops_executed, info.s_ops_skipped, ops,
                                 (time.perf_counter() - tic) * 1e3))
        states.append(x.data)
    return Trajectory(states, ts, ledger, time.perf_counter() - t_start, x)
