"""Experiment configuration: dataclasses, strict JSON loading, validation."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from prepo.scheduler import PACINGS
from prepo.weighting import MODES as ENTROPY_MODES

SELECTION_MODES = ("prepo", "ppl_schedule_only", "random", "low_ppl", "high_ppl")


class ConfigError(ValueError):
    """A configuration violates a documented invariant."""


@dataclass
class TrainConfig:
    total_steps: int = 20
    candidate_batch: int = 64
    sub_batch: int = 16
    group_size: int = 8
    mini_batch: int = 64
    temperature: float = 1.0
    selection: str = "prepo"
    # None: on for "prepo", off for every other selection mode
    weighting: bool | None = None
    entropy_mode: str = "token_weighted"
    weight_gradient: bool = False  # let gradients flow through w_i (off: weights are constants)
    pacing: str = "linear"
    eps_low: float = 0.2
    eps_high: float = 0.28
    learning_rate: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    adam_eps: float = 1e-8
    ppo_epochs: int = 1
    max_rollout_len: int = 8
    correct_reward: float = 1.0
    incorrect_reward: float = 0.0
    window: int = 8
    embed_dim: int = 16
    hidden_dim: int = 32
    init_scale: float = 0.1
    seed: int = 0
    checkpoint_every: int = 0
    sequential: bool = True

    @property
    def use_weighting(self) -> bool:
        return self.selection == "prepo" if self.weighting is None else bool(self.weighting)

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.weighting is None or isinstance(self.weighting, bool), "weighting must be true, false or null")
        need(self.total_steps >= 0, "total_steps must be >= 0")
        need(self.sub_batch >= 1, "sub_batch K must be >= 1")
        need(self.sub_batch <= self.candidate_batch, f"K <= |B| violated: sub_batch={self.sub_batch} > candidate_batch={self.candidate_batch}")
        need(self.group_size >= 2, "group_size G must be >= 2")
        need(self.mini_batch >= self.group_size and self.mini_batch % self.group_size == 0,
             f"mini_batch must be a positive multiple of group_size ({self.group_size})")
        need(self.temperature > 0, "temperature must be > 0")
        need(self.selection in SELECTION_MODES, f"selection must be one of {SELECTION_MODES}")
        need(isinstance(self.weight_gradient, bool), "weight_gradient must be true or false")
        need(not self.weight_gradient or self.use_weighting, "weight_gradient requires weighting to be on")
        need(self.entropy_mode in ENTROPY_MODES, f"entropy_mode must be one of {ENTROPY_MODES}")
        need(self.pacing in PACINGS, f"pacing must be one of {PACINGS}")
        need(0 < self.eps_low < 1, "eps_low must lie in (0, 1)")
        need(self.eps_high >= self.eps_low, "eps_high must be >= eps_low")
        need(self.learning_rate > 0, "learning_rate must be > 0")
        need(0 <= self.beta1 < 1 and 0 <= self.beta2 < 1, "betas must lie in [0, 1)")
        need(self.weight_decay >= 0, "weight_decay must be >= 0")
        need(self.ppo_epochs >= 1, "ppo_epochs must be >= 1")
        need(self.max_rollout_len >= 1, "max_rollout_len must be >= 1")
        need(self.correct_reward > self.incorrect_reward, "correct_reward must exceed incorrect_reward")
        need(min(self.window, self.embed_dim, self.hidden_dim) >= 1, "policy dimensions must be >= 1")
        need(self.checkpoint_every >= 0, "checkpoint_every must be >= 0")


@dataclass
class DatasetConfig:
    seed: int = 0
    n_prompts: int = 512
    level_min: int = 2
    level_max: int = 3
    modulus: int = 5

    def validate(self) -> None:
        if self.n_prompts < 1:
            raise ConfigError("dataset.n_prompts must be >= 1")
        if not 1 <= self.level_min <= self.level_max:
            raise ConfigError("dataset level range must satisfy 1 <= level_min <= level_max")
        if self.modulus < 2:
            raise ConfigError("dataset.modulus must be >= 2")


@dataclass
class EvalConfig:
    n_prompts: int = 64
    k: int = 16
    temperature: float = 1.0

    def validate(self) -> None:
        if self.n_prompts < 0:
            raise ConfigError("eval.n_prompts must be >= 0")
        if self.k < 1:
            raise ConfigError("eval.k must be >= 1")
        if self.temperature <= 0:
            raise ConfigError("eval.temperature must be > 0")


@dataclass
class ExperimentSpec:
    name: str
    train: TrainConfig = field(default_factory=TrainConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    out: str = "runs"

    def validate(self) -> None:
        if not isinstance(self.name, str) or not self.name or "/" in self.name:
            raise ConfigError("name must be a non-empty path component")
        self.train.validate()
        self.dataset.validate()
        self.eval.validate()
        if self.dataset.n_prompts < self.train.candidate_batch:
            raise ConfigError(
                f"dataset size {self.dataset.n_prompts} is smaller than candidate_batch {self.train.candidate_batch}"
            )

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def _build(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = known[name].default
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{where}.{name} must be a boolean")
        elif isinstance(default, int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{where}.{name} must be an integer")
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{where}.{name} must be a number")
            value = float(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def spec_from_dict(data: Any) -> ExperimentSpec:
    if not isinstance(data, dict):
        raise ConfigError("experiment spec must be a mapping")
    top = dict(data)
    sections = {
        "train": TrainConfig,
        "dataset": DatasetConfig,
        "eval": EvalConfig,
    }
    for key, cls in sections.items():
        if key in top:
            top[key] = _build(cls, top[key], key)
    spec = _build(ExperimentSpec, top, "spec")
    spec.validate()
    return spec


def load_spec(path: str | Path) -> ExperimentSpec:
    """Read a JSON experiment spec. Raises OSError, json.JSONDecodeError or ConfigError."""
    with open(path) as f:
        data = json.load(f)
    return spec_from_dict(data)


def dump_spec(spec: ExperimentSpec, path: str | Path) -> None:
    with open(path, "w") as f:
        json.dump(spec.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
