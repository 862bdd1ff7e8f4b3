"""Unnormalized log-densities over terminal sequences."""

from __future__ import annotations

import dataclasses
import math
import re
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

from ..base_lm import TabularLM
from ..core import TokenSequence, as_ids

NEG_INF = float("-inf")


@dataclass(frozen=True)
class RewardSpec:
    """Base class: ``log_reward(z) = log_density(z) / temperature``."""

    teacher: TabularLM | None = field(default=None, compare=False)
    temperature: float = 1.0

    variant = "base"

    def log_density(self, z: tuple[int, ...]) -> float:
        raise NotImplementedError

    def log_reward(self, z) -> float:
        v = self.log_density(as_ids(z))
        if self.temperature == 1.0 or not v > NEG_INF:
            return v
        return v / self.temperature

    def with_temperature(self, temperature: float) -> "RewardSpec":
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        return dataclasses.replace(self, temperature=temperature)


def eval_reward(spec: RewardSpec, z: TokenSequence | Sequence[int]) -> float:
    return spec.log_reward(z)


@dataclass(frozen=True)
class TargetDensity(RewardSpec):
    """Explicit table of log-densities; sequences absent from the table get -inf."""

    table: Mapping[tuple[int, ...], float] = field(default_factory=dict)
    variant = "target_density"

    def log_density(self, z):
        return float(self.table.get(z, NEG_INF))


@dataclass(frozen=True)
class TemperedContinuation(RewardSpec):
    """(1/T) log p(z stop | x)."""

    x: tuple[int, ...] = ()
    T: float = 1.0
    variant = "tempered_continuation"

    def log_density(self, z):
        return self.teacher.continuation_logprob(self.x, z, terminate=True) / self.T


@dataclass(frozen=True)
class Infill(RewardSpec):
    """log p(x z y stop); with empty x this is reverse generation."""

    x: tuple[int, ...] = ()
    y: tuple[int, ...] = ()
    variant = "infill"

    def log_density(self, z):
        return self.teacher.continuation_logprob((), self.x + z + self.y, terminate=True)


@dataclass(frozen=True)
class Contrastive(RewardSpec):
    """alpha log p(x z stop) + beta log p(z stop)."""

    x: tuple[int, ...] = ()
    alpha: float = 1.0
    beta: float = 0.0
    variant = "contrastive"

    def log_density(self, z):
        out = 0.0
        if self.alpha:
            out += self.alpha * self.teacher.continuation_logprob((), self.x + z, terminate=True)
        if self.beta:
            out += self.beta * self.teacher.continuation_logprob((), z, terminate=True)
        return out


Constraint = Callable[[tuple[int, ...]], float]


@dataclass(frozen=True)
class Constrained(RewardSpec):
    """log p(z stop | x) + log c(z) for a nonnegative constraint score c."""

    constraint: Constraint | None = field(default=None, compare=False)
    x: tuple[int, ...] = ()
    variant = "constrained"

    def log_density(self, z):
        c = float(self.constraint(z))
        if c < 0:
            raise ValueError("constraint scores must be nonnegative")
        if c == 0:
            return NEG_INF
        return self.teacher.continuation_logprob(self.x, z, terminate=True) + math.log(c)


@dataclass(frozen=True)
class ArithmeticJoint(RewardSpec):
    """log p(x z y stop) for a tool-completed rationale z; -inf if z is not tool-consistent."""

    x: tuple[int, ...] = ()
    y: tuple[int, ...] = ()
    check: Callable[[tuple[int, ...]], bool] | None = field(default=None, compare=False)
    variant = "arithmetic_joint"

    def log_density(self, z):
        if self.check is not None and not self.check(z):
            return NEG_INF
        return self.teacher.continuation_logprob((), self.x + z + self.y, terminate=True)


# --- named constraints -----------------------------------------------------------------

def must_contain(token_id: int) -> Constraint:
    return lambda z: 1.0 if token_id in z else 0.0


def max_length(n: int) -> Constraint:
    return lambda z: 1.0 if len(z) <= n else 0.0


def regular_pattern(pattern: str, tokens: Sequence[str]) -> Constraint:
    """Accept z when the whitespace-joined token text fully matches ``pattern``."""
    rx = re.compile(pattern)
    return lambda z: 1.0 if rx.fullmatch(" ".join(tokens[i] for i in z)) else 0.0


def parse_constraint(text: str, tokens: Sequence[str]) -> Constraint:
    """Build a constraint from ``must-contain:TOKEN``, ``max-length:N`` or ``regular-pattern:REGEX``."""
    name, _, arg = text.partition(":")
    if name == "must-contain":
        return must_contain(list(tokens).index(arg))
    if name == "max-length":
        return max_length(int(arg))
    if name == "regular-pattern":
        return regular_pattern(arg, tokens)
    raise ValueError(f"unknown constraint {name!r}")
