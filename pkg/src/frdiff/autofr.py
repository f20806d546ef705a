"""Gradient search for the keyframe set.

Each iteration ``n`` gets a logit ``theta_n``; its gate is
``round_ste(sigmoid(theta_n))``, a hard 0/1 value in the forward pass with
an identity gradient. Gates blend freshly computed and cached features and
scores, so the full sampling trajectory is differentiable in ``theta``.
The logits are fitted with Adam against the full-computation sample plus a
ReLU cost penalty; the network stays frozen. Iteration 1 is always open
because nothing is cached before it.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .blocks import Block, Conditioning
from .io import save_tensor, write_csv
from .network import ScoreNetwork
from .reuse import KeyframeSet, MixingSchedule, lambda_of
from .sampling import SamplerConfig, SamplerHooks, ScorePair, StepInfo, Trajectory, initial_noise, sample
from .schedule import NoiseSchedule
from .tensor import Tape, Tensor, relu, round_ste, sigmoid, take, tsum
from .training import Adam, NumericalError

log = logging.getLogger(__name__)

Gate = "Tensor | float"


@dataclass
class GateParams:
    theta: np.ndarray

    @property
    def N(self) -> int:
        return len(self.theta)

    @property
    def alpha(self) -> np.ndarray:
        return 0.5 * (1.0 + np.tanh(0.5 * self.theta))

    @property
    def hard(self) -> np.ndarray:
        """Forward gate values; iteration 1 is clamped open."""
        g = (self.theta >= 0).astype(np.float64)
        g[0] = 1.0
        return g

    def keyframes(self) -> KeyframeSet:
        return KeyframeSet(tuple(int(n) for n in np.flatnonzero(self.hard) + 1), self.N)


@dataclass
class AutoFRConfig:
    cost_lambda: float = 1e-3
    lr: float = 5e-2
    betas: tuple[float, float] = (0.9, 0.999)
    iterations: int = 100
    batch: int = 4
    steps: int = 40
    seed: int = 0
    init_logit: float = 0.5
    tau: float = 30.0
    bias: float = 0.5
    guidance_weight: float = 0.0
    label: Optional[int] = None

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.cost_lambda < 0:
            raise ValueError("cost_lambda must be >= 0")

    def sampler(self) -> SamplerConfig:
        return SamplerConfig(steps=self.steps, guidance_weight=self.guidance_weight, seed=self.seed,
                             label=self.label, batch=self.batch)

    def mixing(self) -> MixingSchedule:
        return MixingSchedule(self.steps, self.tau, self.bias)


def _blend(gate, new: Tensor, old: Tensor) -> Tensor:
    return new * gate + old * (1.0 - gate)


def gated_forward(block: Block, params, x: Tensor, cond: Conditioning, cache: dict[int, Tensor], gate) -> Tensor:
    """``M <- g * S(x) + (1 - g) * M``; returns ``f(M, t) + x``."""
    s = block.split(params, x, cond)
    old = cache.get(block.index)
    m = s if old is None else _blend(gate, s, old)
    cache[block.index] = m
    return block.finish(params, m, x, cond)


def gated_score_memory(eps: Tensor, E: Optional[Tensor], gate, lam: float) -> tuple[Tensor, Tensor]:
    """Update the score memory with the gate, then mix with ``lambda``.

    Returns ``(mixed score, new memory)``; the memory is updated first.
    """
    E_new = eps if E is None else _blend(gate, eps, E)
    if lam == 1.0:
        return eps, E_new
    if lam == 0.0:
        return E_new, E_new
    return eps * lam + E_new * (1.0 - lam), E_new


def cost_loss(theta: Tensor) -> Tensor:
    """``sum_n relu(sigmoid(theta_n) - 1/2)``."""
    return tsum(relu(sigmoid(theta) - 0.5))


class GatedHooks(SamplerHooks):
    def __init__(self, gates: Sequence, mixing: MixingSchedule):
        self.gates = list(gates)
        self.mixing = mixing

    def start(self, net, config, timesteps):
        super().start(net, config, timesteps)
        if len(self.gates) != len(timesteps):
            raise ValueError(f"{len(self.gates)} gates for {len(timesteps)} iterations")
        self.net = net
        self.M: dict[int, Tensor] = {}
        self.E: Optional[ScorePair] = None

    def score(self, n, t, x, evaluate):
        gate = 1.0 if n == 1 else self.gates[n - 1]
        params = self.net.params

        def run(block, h, cond):
            return gated_forward(block, params, h, cond, self.M, gate)

        pair = evaluate(run)
        lam = lambda_of(n, self.mixing)
        E = self.E
        cond_mix, e_cond = gated_score_memory(pair.cond, None if E is None else E.cond, gate, lam)
        uncond_mix = e_uncond = None
        if pair.uncond is not None:
            uncond_mix, e_uncond = gated_score_memory(pair.uncond, None if E is None else E.uncond, gate, lam)
        self.E = ScorePair(e_cond, e_uncond)
        g = gate if isinstance(gate, float) else gate.item()
        keyframe = g >= 0.5
        L = self.n_layers
        return ScorePair(cond_mix, uncond_mix), StepInfo(keyframe, lam, 1, L if keyframe else 0, 0 if keyframe else L)


def gated_sample(net: ScoreNetwork, config: SamplerConfig, schedule: NoiseSchedule, gates: Sequence,
                 mixing: MixingSchedule, x_init=None) -> Trajectory:
    """Sampling trajectory driven by explicit gate values (index ``n - 1``)."""
    return sample(net, config, schedule, GatedHooks(gates, mixing), x_init=x_init)


def ste_gates(theta: Tensor) -> list:
    alpha_star = round_ste(sigmoid(theta))
    return [1.0] + [take(alpha_star, i) for i in range(1, theta.shape[0])]


@dataclass
class AutoFRResult:
    gates: GateParams
    keyframes: KeyframeSet
    history: list[dict] = field(default_factory=list)
    theta_history: np.ndarray = field(default=None, repr=False)
    final_mse: float = float("nan")

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        write_csv(out / "loss.csv", ["iteration", "loss", "mse", "cost", "n_keyframes"],
                  ([h["iteration"], h["loss"], h["mse"], h["cost"], h["n_keyframes"]] for h in self.history))
        N = self.theta_history.shape[1]
        write_csv(out / "theta.csv", ["iteration"] + [f"theta_{n}" for n in range(1, N + 1)],
                  ([i, *row] for i, row in enumerate(self.theta_history)))


def ground_truth(net: ScoreNetwork, schedule: NoiseSchedule, config: AutoFRConfig,
                 x_init: np.ndarray, cache_dir: str | Path | None = None) -> np.ndarray:
    """Full-computation samples for the search noise batch (optionally dumped to disk)."""
    gt = sample(net, config.sampler(), schedule, x_init=x_init).sample
    if cache_dir is not None:
        save_tensor(Path(cache_dir) / "x_gt", gt, name="x_gt")
        save_tensor(Path(cache_dir) / "x_init", x_init, name="x_init")
    return gt


def search_loss(net, schedule, config, theta: Tensor, x_init, x_gt) -> tuple[Tensor, Tensor, Tensor]:
    traj = gated_sample(net, config.sampler(), schedule, ste_gates(theta), config.mixing(), x_init)
    diff = traj.final - Tensor(x_gt)
    mse = (diff * diff).mean()
    cost = cost_loss(take(theta, slice(1, None)))
    return mse + cost * config.cost_lambda, mse, cost


def autofr_search(net: ScoreNetwork, schedule: NoiseSchedule, config: AutoFRConfig,
                  cache_dir: str | Path | None = None) -> AutoFRResult:
    x_init = initial_noise(net, config.sampler())
    x_gt = ground_truth(net, schedule, config, x_init, cache_dir)
    theta = np.full(config.steps, config.init_logit, dtype=np.float64)
    opt = Adam(config.lr, config.betas)
    history, thetas = [], [theta.copy()]
    for it in range(config.iterations):
        with Tape() as tape:
            th = tape.watch(theta, name="theta")
            loss, mse, cost = search_loss(net, schedule, config, th, x_init, x_gt)
            (grad,) = tape.gradient(loss, [th])
        if not math.isfinite(loss.item()) or not np.all(np.isfinite(grad)):
            raise NumericalError(f"non-finite search loss at iteration {it}: {loss.item()}")
        grad[0] = 0.0  # iteration 1 is clamped open
        history.append({"iteration": it, "loss": loss.item(), "mse": mse.item(), "cost": cost.item(),
                        "n_keyframes": int(GateParams(theta).hard.sum())})
        theta = opt.step({"theta": theta}, {"theta": grad})["theta"]
        thetas.append(theta.copy())
        if it % 20 == 0:
            log.info("autofr it %d loss %.6g mse %.6g |K| %d", it, history[-1]["loss"], history[-1]["mse"],
                     history[-1]["n_keyframes"])
    gates = GateParams(theta)
    final = gated_sample(net, config.sampler(), schedule, list(gates.hard), config.mixing(), x_init).sample
    final_mse = float(np.mean((final - x_gt) ** 2))
    return AutoFRResult(gates, gates.keyframes(), history, np.array(thetas), final_mse)
