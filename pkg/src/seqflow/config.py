"""Flat ``key = value`` run configuration with typed defaults and strict key checking."""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, fields
from pathlib import Path

from .training import TrainConfig

TASKS = ("rng", "continuation", "infill", "arithmetic", "constrained", "contrastive", "latent-classify")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    task: str = "rng"
    seed: int = 0
    # optimisation and batch composition (mirrors TrainConfig)
    steps: int = 1000
    batch_size: int = 16
    grad_accum: int = 32
    lr: float = 1e-4
    warmup_steps: int = 0
    weight_decay: float = 0.01
    mix_on_policy: float = 0.5
    mix_tempered: float = 0.25
    mix_replay: float = 0.25
    behavior_temp_min: float = 0.5
    behavior_temp_max: float = 2.0
    reward_temp_start: float = 1.1
    reward_temp_end: float = 0.5
    reward_temp_horizon: int = 150
    buffer_capacity: int = 50
    replay_sampling: str = "uniform"
    conditions_per_step: int = 1
    log_reward_floor: float = -100.0
    pg_entropy_coef: float = 0.0
    pg_reward: str = "raw"
    record_wall_time: bool = False
    # policy network (None keeps the task's own choice)
    policy_hidden: int | None = None
    policy_context_k: int | None = None
    # task knobs
    seed_rationales: int = 50
    n_train: int = 200
    corrupt_fraction: float = 0.0
    continuation_temperature: float = 0.5
    contrastive_alpha: float = 1.0
    contrastive_beta: float = -0.5
    constraint: str = "must-contain:w0"
    em_rounds: int = 0
    em_mode: str = "amortized"
    # evaluation
    eval_temperature: float = 0.1
    eval_samples: int = 10
    answer_mode: str = "greedy"

    def __post_init__(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {', '.join(TASKS)}")
        if self.answer_mode not in ("greedy", "sample"):
            raise ConfigError("answer_mode must be 'greedy' or 'sample'")
        if self.em_mode not in ("amortized", "exact"):
            raise ConfigError("em_mode must be 'amortized' or 'exact'")
        try:
            self.train_config()
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in dataclasses.asdict(self).items() if k in names})

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def _field_types() -> dict[str, type]:
    hints = typing.get_type_hints(RunConfig)
    return {f.name: hints[f.name] for f in fields(RunConfig)}


def _convert(key: str, text: str, tp) -> object:
    args = typing.get_args(tp)
    if typing.get_origin(tp) in (typing.Union, types.UnionType) and type(None) in args:
        if text.lower() == "none":
            return None
        tp = next(a for a in args if a is not type(None))
    try:
        if tp is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0"):
                raise ValueError(text)
            return low in ("true", "1")
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {tp.__name__}") from None


def parse_assignments(pairs, base: RunConfig | None = None) -> RunConfig:
    """Apply ``key=value`` strings (or (key, value) tuples) on top of ``base``."""
    types_ = _field_types()
    changes = {}
    for item in pairs:
        if isinstance(item, str):
            if "=" not in item:
                raise ConfigError(f"expected key=value, got {item!r}")
            key, _, value = item.partition("=")
        else:
            key, value = item
        key, value = key.strip(), str(value).strip()
        if key not in types_:
            raise ConfigError(f"unknown config key {key!r}")
        changes[key] = _convert(key, value, types_[key])
    cfg = base or RunConfig()
    return dataclasses.replace(cfg, **changes)


def parse_text(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse a config file: one ``key = value`` per line; ``#`` starts a comment."""
    pairs = []
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        key, _, value = line.partition("=")
        pairs.append((key, value))
    return parse_assignments(pairs, base)


def load_config(path: str | Path, base: RunConfig | None = None) -> RunConfig:
    return parse_text(Path(path).read_text(), base)


def to_text(cfg: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {'none' if v is None else str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"


def as_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)
