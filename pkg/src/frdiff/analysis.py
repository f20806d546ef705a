"""Measurement tools: temporal change of block outputs, radially averaged PSD,
an operation-count speedup model, and the whole-output-reuse equivalence check.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .io import heatmap, read_csv, write_csv, write_pgm
from .network import ScoreNetwork
from .reuse import MixingSchedule, frdiff_sample, lambda_of, uniform_keyframes
from .sampling import SamplerConfig, SamplerHooks, StepInfo, initial_noise, sample
from .schedule import NoiseSchedule

# ---------------------------------------------------------------------------
# temporal change


class _RecordBlocks(SamplerHooks):
    def __init__(self):
        self.features: dict[int, list[np.ndarray]] = {}

    def start(self, net, config, timesteps):
        super().start(net, config, timesteps)
        self.net = net
        self.features = {blk.index: [] for blk in net.blocks}

    def score(self, n, t, x, evaluate):
        params = self.net.params

        def run(block, h, cond):
            out = block.residual(params, block.split(params, h, cond), cond)
            self.features[block.index].append(out.data)
            return out + h

        return evaluate(run), StepInfo(True, 1.0, 1, self.n_layers, 0)


def record_block_outputs(net: ScoreNetwork, config: SamplerConfig, schedule: NoiseSchedule) -> dict[int, np.ndarray]:
    """Residual-branch outputs ``F_i`` per layer, shaped ``N x rows x ...``."""
    hooks = _RecordBlocks()
    sample(net, config, schedule, hooks)
    return {i: np.stack(v) for i, v in hooks.features.items()}


@dataclass
class SimilarityReport:
    """Per-layer ``K_i(n, n + dt)``; ``values[i]`` is ``(N - dt) x samples``."""

    values: dict[int, np.ndarray]
    dt: int

    @property
    def layers(self) -> list[int]:
        return sorted(self.values)

    @property
    def mean(self) -> np.ndarray:
        return np.stack([self.values[i].mean(axis=1) for i in self.layers])

    @property
    def var(self) -> np.ndarray:
        return np.stack([self.values[i].var(axis=1) for i in self.layers])

    def write_csv(self, path) -> Path:
        mean, var = self.mean, self.var
        rows = ((layer, n + 1, mean[li, n], var[li, n])
                for li, layer in enumerate(self.layers) for n in range(mean.shape[1]))
        return write_csv(path, ["layer", "iteration", "mean", "var"], rows)


def temporal_change(features: Mapping[int, np.ndarray] | Sequence[Mapping[int, np.ndarray]], dt: int = 1) -> SimilarityReport:
    """Mean total-L1 change of each block output between iterations ``dt`` apart, divided by ``dt``.

    ``features`` is one recording (or a list of recordings from different
    seeds) as returned by :func:`record_block_outputs`.
    """
    if dt == 0:
        raise ValueError("dt must be non-zero")
    dt = abs(int(dt))
    recs = [features] if isinstance(features, Mapping) else list(features)
    values = {}
    for layer in recs[0]:
        per = []
        for rec in recs:
            f = rec[layer]
            if f.shape[0] <= dt:
                raise ValueError(f"trajectory of {f.shape[0]} steps too short for dt={dt}")
            diff = np.abs(f[dt:] - f[:-dt]).reshape(f.shape[0] - dt, f.shape[1], -1).sum(axis=2)
            per.append(diff / dt)
        values[layer] = np.concatenate(per, axis=1)
    return SimilarityReport(values, dt)


def measure_temporal_change(net: ScoreNetwork, schedule: NoiseSchedule, steps: int = 50, seeds: int = 8,
                            dt: int = 1, label: Optional[int] = None, guidance_weight: float = 0.0) -> SimilarityReport:
    recs = [record_block_outputs(net, SamplerConfig(steps=steps, seed=s, label=label,
                                                    guidance_weight=guidance_weight), schedule)
            for s in range(seeds)]
    return temporal_change(recs, dt)


def write_feature_heatmaps(features: Mapping[int, np.ndarray], out_dir, iterations: Sequence[int]) -> list[Path]:
    """PGM renderings of the first sample's block outputs at chosen iterations."""
    paths = []
    for layer, f in sorted(features.items()):
        for n in iterations:
            fmap = f[n - 1, 0]
            if fmap.ndim == 2:  # tokens x dim -> dim x tokens
                fmap = fmap.T
                side = int(round(math.sqrt(fmap.shape[1])))
                fmap = fmap.reshape(fmap.shape[0], side, -1) if side * side == fmap.shape[1] else fmap[None]
            paths.append(write_pgm(Path(out_dir) / f"layer{layer:02d}_iter{n:03d}.pgm", heatmap(fmap),
                                   model_space=False))
    return paths


# ---------------------------------------------------------------------------
# power spectral density

POWER_FLOOR = 1e-30


@dataclass
class PsdCurve:
    """Radially averaged power per integer-radius ring.

    Power is ``|FFT|^2 / (h w)`` so ring sums obey Parseval. ``log_power`` is
    the batch average of ``log10`` ring means.
    """

    rings: np.ndarray
    counts: np.ndarray
    ring_power: np.ndarray  # samples x rings, linear
    n_samples: int
    size: int

    @property
    def per_sample_log(self) -> np.ndarray:
        return np.log10(np.maximum(self.ring_power, POWER_FLOOR))

    @property
    def log_power(self) -> np.ndarray:
        return self.per_sample_log.mean(axis=0)

    @property
    def nyquist_ring(self) -> int:
        """Axis Nyquist radius; rings past it hold only the corner frequencies."""
        return self.size // 2

    def write_csv(self, path) -> Path:
        return write_csv(path, ["ring", "log_power"], zip(self.rings, self.log_power))


def _as_batch(images) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[:, None]
    if x.ndim != 4:
        raise ValueError(f"expected images as (b,)(c,)h,w, got shape {x.shape}")
    if x.shape[-1] != x.shape[-2]:
        raise ValueError(f"PSD needs square images, got {x.shape[-2:]}")
    return x


def psd(images) -> PsdCurve:
    x = _as_batch(images)
    b, c, h, w = x.shape
    power = (np.abs(np.fft.fft2(x)) ** 2 / (h * w)).mean(axis=1)
    ky = np.fft.fftfreq(h) * h
    kx = np.fft.fftfreq(w) * w
    radius = np.floor(np.hypot(ky[:, None], kx[None, :])).astype(np.int64)
    # rings up to the corner so Parseval holds; the axis Nyquist ring is h // 2
    n_rings = radius.max() + 1
    counts = np.bincount(radius.ravel(), minlength=n_rings)
    sums = np.stack([np.bincount(radius.ravel(), weights=p.ravel(), minlength=n_rings) for p in power])
    return PsdCurve(np.arange(n_rings), counts, sums / counts, b, h)


def ring_deficit(base: PsdCurve, other: PsdCurve, rings: Sequence[int]) -> np.ndarray:
    """Per-sample mean log10 power lost relative to ``base`` over ``rings``."""
    rings = list(rings)
    return (base.per_sample_log[:, rings] - other.per_sample_log[:, rings]).mean(axis=1)


def top_quartile_rings(curve: PsdCurve) -> list[int]:
    """Rings in the upper quarter of ``[0, Nyquist]``."""
    nyq = curve.nyquist_ring
    return list(range(math.ceil(0.75 * nyq), nyq + 1))


def sign_test(wins: int, n: int) -> float:
    """One-sided binomial p-value ``P(X >= wins)`` for ``X ~ Bin(n, 1/2)``."""
    return sum(math.comb(n, k) for k in range(wins, n + 1)) / 2.0 ** n


@dataclass
class SpectralComparison:
    """High-ring power deficits against the full-computation baseline.

    ``deficits[method]`` holds one value per sample: the mean log10 power
    lost over the top-quartile rings. Methods run at matched cost: the
    reduced-step solver takes ``N / M`` steps; reuse and mixing keep the
    same ``ceil(N / M)`` keyframes.
    """

    curves: dict[str, PsdCurve]
    deficits: dict[str, np.ndarray]
    rings: list[int]
    samples: dict[str, np.ndarray]

    def wins(self, a: str, b: str, strict: bool = True) -> int:
        """Samples where ``a`` loses more high-ring power than ``b`` (``>=`` if not strict)."""
        da, db = self.deficits[a], self.deficits[b]
        return int(np.sum(da > db if strict else da >= db))

    def summary(self) -> dict:
        n = len(self.deficits["reduced"])
        red_fr = self.wins("reduced", "fr")
        mix_fr = self.wins("fr", "mixing", strict=False)
        mix_red = self.wins("reduced", "mixing", strict=False)
        return {
            "rings": self.rings,
            "n_samples": n,
            "mean_deficit": {k: float(v.mean()) for k, v in self.deficits.items()},
            "reduced_gt_fr": red_fr,
            "reduced_gt_fr_p": sign_test(red_fr, n),
            "mixing_le_fr": mix_fr,
            "mixing_le_fr_p": sign_test(mix_fr, n),
            "mixing_le_reduced": mix_red,
            "mixing_le_reduced_p": sign_test(mix_red, n),
        }


def _method_samples(net, schedule, N, M, n_samples, seed, label, guidance_weight, mixing) -> dict[str, np.ndarray]:
    base = SamplerConfig(steps=N, seed=seed, batch=n_samples, label=label, guidance_weight=guidance_weight)
    x0 = initial_noise(net, base)
    ts = schedule.timesteps(N)
    reduced = SamplerConfig(steps=len(ts[::M]), seed=seed, batch=n_samples, label=label,
                            guidance_weight=guidance_weight, timesteps=ts[::M])
    ks = uniform_keyframes(N, M)
    return {
        "baseline": sample(net, base, schedule, x_init=x0).sample,
        "reduced": sample(net, reduced, schedule, x_init=x0).sample,
        "fr": frdiff_sample(net, base, ks, None, schedule, x_init=x0).sample,
        "mixing": frdiff_sample(net, base, ks, mixing or MixingSchedule(N), schedule, x_init=x0).sample,
    }


def spectral_comparison(net: ScoreNetwork, schedule: NoiseSchedule, N: int = 50, M: int = 5,
                        n_samples: int = 256, seed: int = 0, labels: Sequence[Optional[int]] = (None,),
                        guidance_weight: float = 0.0, mixing: Optional[MixingSchedule] = None) -> SpectralComparison:
    """Baseline, reduced-step, reuse and reuse+mixing samples from shared noise.

    ``n_samples`` is split evenly across ``labels``; each label batch uses
    its own seed offset so classes do not share noise.
    """
    per = n_samples // len(labels)
    if per < 1:
        raise ValueError("need at least one sample per label")
    runs = [_method_samples(net, schedule, N, M, per, seed + i, lab, guidance_weight, mixing)
            for i, lab in enumerate(labels)]
    samples = {k: np.concatenate([r[k] for r in runs]) for k in runs[0]}
    curves = {k: psd(v) for k, v in samples.items()}
    rings = top_quartile_rings(curves["baseline"])
    deficits = {k: ring_deficit(curves["baseline"], c, rings) for k, c in curves.items() if k != "baseline"}
    return SpectralComparison(curves, deficits, rings, samples)


# ---------------------------------------------------------------------------
# cost model


@dataclass
class CostModel:
    """Per-block cost ``c_i`` and skippable fraction ``s_i`` over an N-step schedule.

    With ``skip_zero_lambda`` the non-keyframe iterations where the mixing
    weight is 0 cost nothing (the network is not evaluated there).
    """

    block_costs: np.ndarray
    skippable: np.ndarray
    N: int
    keyframes: Sequence[int]
    mixing: Optional[MixingSchedule] = None
    skip_zero_lambda: bool = False

    def __post_init__(self):
        self.block_costs = np.atleast_1d(np.asarray(self.block_costs, dtype=np.float64))
        self.skippable = np.broadcast_to(np.asarray(self.skippable, dtype=np.float64), self.block_costs.shape)
        if np.any((self.skippable < 0) | (self.skippable > 1)):
            raise ValueError("skippable fractions must lie in [0, 1]")
        self.keyframes = tuple(self.keyframes)
        if not self.keyframes:
            raise ValueError("keyframe set is empty")

    @classmethod
    def uniform(cls, skippable: float, N: int, interval: int = 1, keyframes: Sequence[int] | None = None,
                **kw) -> "CostModel":
        ks = uniform_keyframes(N, interval).members if keyframes is None else keyframes
        return cls(np.ones(1), np.array([skippable]), N, ks, **kw)

    @classmethod
    def from_network(cls, net: ScoreNetwork, N: int, keyframes: Sequence[int], **kw) -> "CostModel":
        costs, frac = [net.overhead_cost()], [0.0]
        for s, f in net.block_costs():
            costs.append(s + f)
            frac.append(s / (s + f))
        return cls(np.array(costs), np.array(frac), N, keyframes, **kw)

    @classmethod
    def from_csv(cls, path, N: int, keyframes: Sequence[int], **kw) -> "CostModel":
        """Latency table with columns ``block,cost,skippable``."""
        rows = read_csv(path)
        return cls(np.array([float(r["cost"]) for r in rows]), np.array([float(r["skippable"]) for r in rows]),
                   N, keyframes, **kw)

    @property
    def full(self) -> float:
        return float(self.block_costs.sum())

    @property
    def nonskippable(self) -> float:
        return float(((1.0 - self.skippable) * self.block_costs).sum())

    def step_costs(self) -> np.ndarray:
        ks = set(self.keyframes)
        out = np.empty(self.N)
        for n in range(1, self.N + 1):
            if n in ks:
                out[n - 1] = self.full
            elif self.skip_zero_lambda and self.mixing is not None and lambda_of(n, self.mixing) == 0.0:
                out[n - 1] = 0.0
            else:
                out[n - 1] = self.nonskippable
        return out


def speedup_model(cost: CostModel) -> float:
    """``N * C_full / sum_n C_n``: baseline cost over reuse-schedule cost."""
    return cost.N * cost.full / math.fsum(cost.step_costs())  # exact sum: order-free, so monotone in M


# ---------------------------------------------------------------------------
# whole-output reuse vs reduced step count


@dataclass
class EquivalenceReport:
    max_abs_dev: float
    N: int
    stride: int
    reduced_steps: int
    uneven: bool


class _OutputReuse(SamplerHooks):
    def __init__(self, stride: int):
        self.stride = stride

    def start(self, net, config, timesteps):
        super().start(net, config, timesteps)
        self.saved = None

    def score(self, n, t, x, evaluate):
        if (n - 1) % self.stride == 0:
            self.saved = evaluate()
            return self.saved, StepInfo(True, 0.0, 1, self.n_layers, 0)
        return self.saved, StepInfo(False, 0.0, 0, 0, self.n_layers)


def verify_nfe_equivalence(net: ScoreNetwork, schedule: NoiseSchedule, N: int, stride: int,
                           config: Optional[SamplerConfig] = None) -> EquivalenceReport:
    """Max |difference| between reduced-step DDIM and N-step DDIM that reuses
    each evaluated score for the rest of its ``stride`` window."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    base = config or SamplerConfig(steps=N, batch=2)
    ts = schedule.timesteps(N)
    full = SamplerConfig(steps=N, solver="ddim", guidance_weight=base.guidance_weight, seed=base.seed,
                         label=base.label, batch=base.batch, timesteps=ts)
    reduced_ts = ts[::stride]
    reduced = SamplerConfig(steps=len(reduced_ts), solver="ddim", guidance_weight=base.guidance_weight,
                            seed=base.seed, label=base.label, batch=base.batch, timesteps=reduced_ts)
    a = sample(net, reduced, schedule).sample
    b = sample(net, full, schedule, _OutputReuse(stride)).sample
    return EquivalenceReport(float(np.max(np.abs(a - b))), N, stride, len(reduced_ts), N % stride != 0)
