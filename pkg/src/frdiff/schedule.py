"""Noise schedules and single-step solvers.

Solver functions are written with plain arithmetic so they work on numpy
arrays and on :class:`~frdiff.tensor.Tensor` values alike.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta DDPM schedule.

    ``alpha_bar`` has ``T + 1`` entries; ``alpha_bar[0] = 1`` so a solver step
    into time 0 lands on the clean-data estimate.
    """

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bar: np.ndarray

    @classmethod
    def linear(cls, T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> "NoiseSchedule":
        if T < 1:
            raise ValueError("T must be positive")
        if not 0 < beta_start <= beta_end < 1:
            raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
        return cls.from_betas(betas)

    @classmethod
    def from_betas(cls, betas) -> "NoiseSchedule":
        betas = np.asarray(betas, dtype=np.float64)
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ValueError("betas must lie in (0, 1)")
        alphas = 1.0 - betas
        alpha_bar = np.concatenate([[1.0], np.cumprod(alphas)])
        for arr in (betas, alphas, alpha_bar):
            arr.setflags(write=False)
        return cls(len(betas), betas, alphas, alpha_bar)

    def timesteps(self, n_steps: int) -> np.ndarray:
        """Diffusion times visited by an ``n_steps`` sampler, high to low.

        Uniform stride over ``[1, T]``: ``T, T - T/N, ..., T/N`` (rounded).
        """
        if n_steps < 1 or n_steps > self.T:
            raise ValueError(f"n_steps must be in [1, {self.T}], got {n_steps}")
        ts = np.round(np.linspace(self.T, self.T / n_steps, n_steps)).astype(np.int64)
        return ts

    def add_noise(self, x0: np.ndarray, noise: np.ndarray, t: np.ndarray) -> np.ndarray:
        ab = self.alpha_bar[np.asarray(t)].reshape((-1,) + (1,) * (x0.ndim - 1))
        return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


def ddim_coefficients(schedule: NoiseSchedule, t: int, t_prev: int) -> tuple[float, float, float]:
    if not t > t_prev >= 0:
        raise ValueError(f"DDIM step needs t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    ab_t = float(schedule.alpha_bar[t])
    ab_prev = float(schedule.alpha_bar[t_prev])
    return math.sqrt(ab_prev / ab_t), math.sqrt(1.0 - ab_t), math.sqrt(1.0 - ab_prev)


def ddim_step(x_t, eps, t: int, t_prev: int, schedule: NoiseSchedule):
    """Deterministic (eta = 0) DDIM update from time ``t`` to ``t_prev``."""
    ratio, sig_t, sig_prev = ddim_coefficients(schedule, t, t_prev)
    # grouped so equal alpha_bar gives x_t and eps = 0 gives ratio * x_t exactly
    return x_t * ratio + eps * (sig_prev - ratio * sig_t)


def ddpm_step(x_t, eps, t: int, t_prev: int, schedule: NoiseSchedule, noise):
    """Ancestral (eta = 1) step; reference implementation only."""
    ab_t = float(schedule.alpha_bar[t])
    ab_prev = float(schedule.alpha_bar[t_prev])
    if not t > t_prev >= 0:
        raise ValueError(f"DDPM step needs t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    sigma = math.sqrt((1 - ab_prev) / (1 - ab_t) * (1 - ab_t / ab_prev))
    x0 = (x_t - eps * math.sqrt(1 - ab_t)) * (1.0 / math.sqrt(ab_t))
    direction = eps * math.sqrt(max(1 - ab_prev - sigma**2, 0.0))
    return x0 * math.sqrt(ab_prev) + direction + noise * sigma


def cfg_combine(eps_cond, eps_uncond, w: float):
    """Classifier-free guidance: ``(1 + w) * cond - w * uncond``."""
    if w == 0:
        return eps_cond
    # same value as (1 + w) * cond - w * uncond, exact when cond == uncond
    return eps_cond + (eps_cond - eps_uncond) * w
