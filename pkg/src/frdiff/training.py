"""Noise-matching training of the toy score networks."""
from __future__ import annotations

import logging
import math
from pathlib import Path
from typing import Mapping

import numpy as np

from .data import Dataset
from .io import write_csv
from .network import ScoreNetwork
from .schedule import NoiseSchedule
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Loss or parameters became non-finite."""


class Adam:
    def __init__(self, lr: float = 1e-3, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        out = {}
        for name in sorted(params):
            p = params[name]
            g = grads.get(name)
            if g is None:
                out[name] = p
                continue
            m = self.m.get(name, np.zeros_like(p))
            v = self.v.get(name, np.zeros_like(p))
            m = self.b1 * m + (1 - self.b1) * g
            v = self.b2 * v + (1 - self.b2) * (g * g)
            self.m[name], self.v[name] = m, v
            out[name] = p - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out


def noise_matching_loss(net: ScoreNetwork, x0: np.ndarray, labels: np.ndarray, t: np.ndarray,
                        noise: np.ndarray, schedule: NoiseSchedule) -> Tensor:
    xt = schedule.add_noise(x0, noise, t)
    diff = net(xt, t, labels) - Tensor(noise)
    return (diff * diff).mean()


def train_toy(
    net: ScoreNetwork,
    data: Dataset,
    schedule: NoiseSchedule,
    steps: int,
    lr: float = 2e-3,
    batch: int = 64,
    seed: int = 0,
    cond_drop: float = 0.15,
    loss_csv: str | Path | None = None,
) -> tuple[ScoreNetwork, np.ndarray]:
    """Adam on ``E ||eps - eps_theta(x_t, t, c)||^2`` with label dropout for CFG.

    Returns the trained network and the per-step loss curve; the curve is
    also written to ``loss_csv`` (``step,loss``) when given.
    """
    if data.image_shape != net.image_shape:
        raise ValueError(f"dataset shape {data.image_shape} does not match network {net.image_shape}")
    rng = np.random.default_rng(seed)
    opt = Adam(lr)
    params = net.param_arrays()
    losses = np.zeros(steps)
    for step in range(steps):
        x0, labels = data.batch(rng, batch)
        labels = np.where(rng.random(batch) < cond_drop, net.null_label, labels)
        t = rng.integers(1, schedule.T + 1, batch)
        noise = rng.standard_normal(x0.shape)
        with Tape() as tape:
            leaves = {k: tape.watch(v) for k, v in params.items()}
            loss = noise_matching_loss(net.with_params(leaves), x0, labels, t, noise, schedule)
            grads_by_id = tape.backward(loss)
        value = loss.item()
        if not math.isfinite(value):
            raise NumericalError(f"training diverged at step {step}: loss={value}")
        losses[step] = value
        grads = {k: grads_by_id[leaf.grad_id] for k, leaf in leaves.items() if leaf.grad_id in grads_by_id}
        params = opt.step(params, grads)
        if step % 500 == 0:
            log.info("step %d loss %.5f", step, value)
    trained = net.with_params({k: Tensor(v) for k, v in params.items()})
    if loss_csv is not None:
        write_csv(loss_csv, ["step", "loss"], ((i, l) for i, l in enumerate(losses)))
    return trained, losses
