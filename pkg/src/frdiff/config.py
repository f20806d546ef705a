"""Run configuration: a JSON tree of sections with every default spelled out.

Precedence, lowest first: built-in defaults, config file, ``FRDIFF_OUT``
(for ``io.out_dir``), command-line flags. Unknown sections or keys are
rejected rather than ignored.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .blocks import KINDS


class ConfigError(ValueError):
    """Invalid or unknown configuration entry."""


@dataclass
class ModelConfig:
    arch: str = "toy_dit"
    width: int = 32
    depth: int = 4
    seed: int = 0


@dataclass
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class SamplerSection:
    N: int = 50
    solver: str = "ddim"
    guidance_weight: float = 0.0
    seed: int = 0
    label: Optional[int] = None
    batch: int = 8


@dataclass
class FRConfig:
    interval: int = 1
    keyframes: Optional[list[int]] = None
    mixing: bool = False
    tau: float = 30.0
    bias: float = 0.5
    reuse_scope: list[str] = field(default_factory=lambda: list(KINDS))


@dataclass
class AutoFRSection:
    cost_lambda: float = 1e-3
    lr: float = 5e-2
    iters: int = 100
    batch: int = 4
    init_logit: float = 0.5


@dataclass
class TrainConfig:
    corpus: str = "shapes"
    corpus_seed: int = 0
    steps: int = 3000
    lr: float = 2e-3
    batch: int = 64
    cond_drop: float = 0.15


@dataclass
class AnalysisConfig:
    seeds: int = 8
    dt: int = 1
    stride: int = 2
    skippable: Optional[float] = None
    latency_csv: Optional[str] = None
    skip_zero_lambda: bool = False
    heatmap_iterations: list[int] = field(default_factory=lambda: [1, 25, 50])


@dataclass
class IOConfig:
    out_dir: str = "runs"
    run_name: Optional[str] = None
    checkpoint: Optional[str] = None


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    fr: FRConfig = field(default_factory=FRConfig)
    autofr: AutoFRSection = field(default_factory=AutoFRSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    io: IOConfig = field(default_factory=IOConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def digest(self) -> str:
        d = self.to_dict()
        d["io"] = {k: v for k, v in d["io"].items() if k not in ("out_dir", "run_name")}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:10]

    def get(self, path: str) -> Any:
        section, key = path.split(".")
        return getattr(getattr(self, section), key)

    def set(self, path: str, value: Any) -> None:
        section, key = _split(path)
        sec = getattr(self, section)
        f = {x.name: x for x in dataclasses.fields(sec)}
        if key not in f:
            raise ConfigError(f"unknown config key {path!r}")
        setattr(sec, key, _coerce(path, f[key], value))

    def validate(self) -> "RunConfig":
        if self.model.arch not in ("toy_unet", "toy_dit"):
            raise ConfigError(f"model.arch must be toy_unet or toy_dit, got {self.model.arch!r}")
        for path in ("model.width", "model.depth", "schedule.T", "sampler.N", "sampler.batch", "fr.interval",
                     "autofr.iters", "autofr.batch", "analysis.seeds", "analysis.stride"):
            if self.get(path) < 1:
                raise ConfigError(f"{path} must be >= 1")
        if not 0 < self.schedule.beta_start <= self.schedule.beta_end < 1:
            raise ConfigError("need 0 < beta_start <= beta_end < 1")
        if self.sampler.solver not in ("ddim", "ddpm"):
            raise ConfigError(f"sampler.solver must be ddim or ddpm, got {self.sampler.solver!r}")
        if self.sampler.guidance_weight < 0 or self.autofr.cost_lambda < 0:
            raise ConfigError("guidance_weight and cost_lambda must be >= 0")
        if self.analysis.dt == 0:
            raise ConfigError("analysis.dt must be non-zero")
        unknown = set(self.fr.reuse_scope) - set(KINDS)
        if unknown:
            raise ConfigError(f"fr.reuse_scope has unknown block kinds {sorted(unknown)}")
        if self.analysis.skippable is not None and not 0 <= self.analysis.skippable <= 1:
            raise ConfigError("analysis.skippable must lie in [0, 1]")
        return self


def _split(path: str) -> tuple[str, str]:
    parts = path.split(".")
    sections = {f.name for f in dataclasses.fields(RunConfig)}
    if len(parts) != 2 or parts[0] not in sections:
        raise ConfigError(f"unknown config key {path!r}")
    return parts[0], parts[1]


def _coerce(path: str, f: dataclasses.Field, value: Any) -> Any:
    kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    if value is None:
        if not kind.startswith("Optional"):
            raise ConfigError(f"{path} may not be null")
        return None
    base = kind.removeprefix("Optional[").removesuffix("]")
    try:
        if base == "bool":
            if not isinstance(value, bool):
                raise TypeError
            return value
        if base == "int":
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise TypeError
            return int(value)
        if base == "float":
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if base == "str":
            if not isinstance(value, str):
                raise TypeError
            return value
        if base.startswith("list["):
            if not isinstance(value, (list, tuple)):
                raise TypeError
            item = int if "int" in base else str
            return [item(v) for v in value]
    except (TypeError, ValueError):
        raise ConfigError(f"{path}: cannot use {value!r} as {base}") from None
    raise ConfigError(f"{path}: unsupported field type {kind}")


def from_dict(tree: dict) -> RunConfig:
    if not isinstance(tree, dict):
        raise ConfigError("config root must be an object")
    cfg = RunConfig()
    for section, values in tree.items():
        if not isinstance(values, dict):
            raise ConfigError(f"config section {section!r} must be an object")
        if section not in cfg.to_dict():
            raise ConfigError(f"unknown config section {section!r}")
        for key, value in values.items():
            cfg.set(f"{section}.{key}", value)
    return cfg


def load(path: str | os.PathLike | None = None, env: Optional[dict] = None) -> RunConfig:
    """Defaults, then the optional file, then ``FRDIFF_OUT``."""
    cfg = RunConfig()
    if path is not None:
        try:
            tree = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        cfg = from_dict(tree)
    env = os.environ if env is None else env
    if env.get("FRDIFF_OUT"):
        cfg.io.out_dir = env["FRDIFF_OUT"]
    return cfg
