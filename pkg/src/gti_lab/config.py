"""Experiment config: nested dataclasses loaded from YAML.

Unknown keys are rejected. Environment variables may override paths
(``GTI_WORKDIR``) but never hyperparameters.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .lm import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    n_items: int = 128
    depth: int = 4
    branching: int = 8
    dim: int = 32
    noise: float = 0.02
    decay: float = 0.45
    offset: float = 1.0
    n_users: int = 256
    seq_len_min: int = 4
    seq_len_max: int = 7
    affinity: float = 0.8
    home_level: int = 1
    max_history: int = 4
    seed: int = 0


@dataclass
class RQConfig:
    levels: int = 4
    size: int = 8
    seed: int = 0
    collision_policy: str = "sinkhorn"
    epsilon: float = 0.05
    iterations: int = 500


@dataclass
class PhaseConfig:
    steps: int = 600
    batch_size: int = 16
    lr: float = 0.1
    momentum: float = 0.9
    clip: float = 1.0


@dataclass
class GroundConfig:
    steps: int = 500
    batch_size: int = 16
    lr: float = 1.5
    bidirectional: bool = True
    start: str = "mean"
    unfreeze_steps: int = 0
    unfreeze_lr: float = 0.05


@dataclass
class EvalConfig:
    ks: list = field(default_factory=lambda: [1, 5, 10, 20])
    beam: int | None = None
    baseline: str = "mi_vanilla"
    split: str = "test"
    max_queries: int | None = None

    @property
    def beam_width(self) -> int:
        return self.beam if self.beam is not None else max(200, max(self.ks))


@dataclass
class DiagnosticsConfig:
    n_sample: int = 50
    heatmaps: bool = True


@dataclass
class ExperimentSpec:
    name: str = "default"
    workdir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    rq: RQConfig = field(default_factory=RQConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PhaseConfig = field(default_factory=lambda: PhaseConfig(steps=600, lr=0.1))
    ground: GroundConfig = field(default_factory=GroundConfig)
    sft: PhaseConfig = field(default_factory=lambda: PhaseConfig(steps=400, lr=0.05))
    strategies: list = field(default_factory=lambda: ["mean", "gti"])
    sft_modes: list = field(default_factory=lambda: ["vanilla", "multitask"])
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    eval: EvalConfig = field(default_factory=EvalConfig)
    diagnostics: DiagnosticsConfig = field(default_factory=DiagnosticsConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        body = self.to_dict()
        body.pop("workdir")
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()

    def with_seeds(self, seeds) -> ExperimentSpec:
        return dataclasses.replace(self, seeds=list(seeds))


def _build(cls, raw, where: str):
    if not dataclasses.is_dataclass(cls):
        return raw
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(raw) - set(fields)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in raw.items():
        sub = _SECTIONS.get((cls.__name__, name))
        kwargs[name] = _build(sub, value, f"{where}.{name}") if sub else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


_SECTIONS = {
    ("ExperimentSpec", "data"): DataConfig,
    ("ExperimentSpec", "rq"): RQConfig,
    ("ExperimentSpec", "model"): ModelConfig,
    ("ExperimentSpec", "pretrain"): PhaseConfig,
    ("ExperimentSpec", "ground"): GroundConfig,
    ("ExperimentSpec", "sft"): PhaseConfig,
    ("ExperimentSpec", "eval"): EvalConfig,
    ("ExperimentSpec", "diagnostics"): DiagnosticsConfig,
}


def load_spec(path=None) -> ExperimentSpec:
    """Parse a YAML experiment config (defaults when ``path`` is None)."""
    raw = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    spec = _build(ExperimentSpec, raw, "spec")
    if "GTI_WORKDIR" in os.environ:
        spec.workdir = os.environ["GTI_WORKDIR"]
    validate(spec)
    return spec


def validate(spec: ExperimentSpec) -> None:
    if spec.rq.levels < 1 or spec.rq.size < 2:
        raise ConfigError("rq: need levels >= 1 and size >= 2")
    if spec.data.n_items < spec.rq.size:
        raise ConfigError("data.n_items must be at least rq.size")
    for s in spec.strategies:
        if s not in ("mean", "gti", "random"):
            raise ConfigError(f"unknown strategy {s!r}")
    for m in spec.sft_modes:
        if m not in ("vanilla", "multitask"):
            raise ConfigError(f"unknown sft mode {m!r}")
    if not spec.seeds or len(set(spec.seeds)) != len(spec.seeds):
        raise ConfigError("seeds must be a non-empty list of distinct integers")
    if spec.ground.start not in ("mean", "random"):
        raise ConfigError("ground.start must be 'mean' or 'random'")


def dump_spec(spec: ExperimentSpec) -> str:
    return yaml.safe_dump(spec.to_dict(), sort_keys=False)
