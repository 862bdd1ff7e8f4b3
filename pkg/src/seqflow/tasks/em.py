"""Expectation-maximization over latent sequences with an exact or amortized E-step."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..base_lm import TabularLM, m_step_update
from ..core import as_ids
from ..oracle import (
    Bounds,
    as_bounds,
    latent_log_weights,
    logsumexp_pairwise,
    marginal_likelihood,
)
from ..policy import Condition, DeltaPolicy, sample_batch
from ..training import TrainConfig, train
from .rewards import Infill


@dataclass
class EMConfig:
    rounds: int = 1
    mode: str = "amortized"          # or "exact"
    m_samples: int = 16              # policy samples per (x, y) pair in the M-step
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in ("amortized", "exact"):
            raise ValueError("mode must be 'amortized' or 'exact'")


def total_log_marginal(teacher: TabularLM, data: Sequence[tuple], bounds) -> float:
    """Sum over data of log p(y | x), marginalizing the bounded latent space exactly."""
    counts = Counter((as_ids(x), as_ids(y)) for x, y in data)
    return float(sum(c * marginal_likelihood(teacher, x, y, bounds) for (x, y), c in sorted(counts.items())))


def exact_m_step(teacher: TabularLM, data: Sequence[tuple], bounds) -> TabularLM:
    """Refit on every latent sequence weighted by its exact posterior probability."""
    counts = Counter((as_ids(x), as_ids(y)) for x, y in data)
    samples = []
    for (x, y), c in sorted(counts.items()):
        zs, logs = latent_log_weights(teacher, x, y, bounds)
        post = np.exp(logs - logsumexp_pairwise(logs))
        samples.extend((x, z.ids, y, c * float(w)) for z, w in zip(zs, post) if w > 0)
    return m_step_update(teacher, samples)


def em_loop(teacher: TabularLM, policy: DeltaPolicy | None, data: Sequence[tuple], rounds: int,
            cfg: EMConfig | None = None, bounds: Bounds | tuple | None = None):
    """Alternate posterior inference over latents and refitting of the teacher.

    In amortized mode each round trains the policy (conditioned on x and y) against
    the infill reward under the current teacher, then refits the teacher on policy
    samples with unit weights. Returns (teacher, policy, per-round metrics).
    """
    cfg = cfg or EMConfig(rounds=rounds)
    if bounds is None:
        if policy is None:
            raise ValueError("bounds required without a policy")
        bounds = Bounds(policy.min_len, policy.max_len)
    b = as_bounds(bounds)
    metrics = []
    rng = np.random.default_rng(cfg.seed)
    pairs = [(as_ids(x), as_ids(y)) for x, y in data]
    for r in range(rounds):
        before = total_log_marginal(teacher, pairs, b)
        rec = {"round": r, "log_marginal_before": before}
        if cfg.mode == "exact":
            teacher = exact_m_step(teacher, pairs, b)
        else:
            if policy is None:
                raise ValueError("amortized mode requires a policy")
            policy = policy.with_teacher(teacher)
            conds = sorted({Condition(x, y) for x, y in pairs}, key=lambda c: c.key)

            def family(c: Condition, teacher=teacher):
                return Infill(teacher=teacher, x=c.x, y=c.y)

            res = train(policy, family, conds, cfg.train)
            policy = res.policy
            rec["final_loss"] = res.metrics[-1]["loss"] if res.metrics else None
            cs = [Condition(x, y) for x, y in pairs for _ in range(cfg.m_samples)]
            trajs = sample_batch(policy, cs, [1.0] * len(cs), rng)
            samples = [(c.x, t.sequence.ids, c.y, 1.0) for c, t in zip(cs, trajs)]
            teacher = m_step_update(teacher, samples)
            policy = policy.with_teacher(teacher)
        rec["log_marginal_after"] = total_log_marginal(teacher, pairs, b)
        metrics.append(rec)
    return teacher, policy, metrics
