"""Posterior-predictive answers by majority vote over sampled latents."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..base_lm import TabularLM
from ..core import as_ids
from ..oracle import logsumexp_pairwise
from ..policy import Condition, ToolFn, as_condition, sample_batch


@dataclass(frozen=True)
class Prediction:
    answer: tuple[int, ...]
    histogram: dict[tuple[int, ...], int]
    latents: list[tuple[int, ...]]


def answer_logprobs(teacher: TabularLM, context: Sequence[int], answers: Sequence[tuple[int, ...]]) -> np.ndarray:
    """log p(y stop | context) for each candidate answer, renormalized over the answer set."""
    ctx = tuple(context)
    raw = np.array([teacher.continuation_logprob(ctx, y, terminate=True) for y in answers])
    z = logsumexp_pairwise(raw)
    if not z > -np.inf:
        raise ValueError("no decodable answer: every candidate has zero probability")
    return raw - z


def decode_answer(teacher: TabularLM, context: Sequence[int], answers: Sequence[tuple[int, ...]],
                  mode: str = "greedy", rng: np.random.Generator | None = None) -> tuple[int, np.ndarray]:
    """Index of the decoded answer (argmax or a draw) and the normalized answer log-probabilities."""
    lp = answer_logprobs(teacher, context, answers)
    if mode == "greedy":
        return int(np.argmax(lp)), lp
    if mode == "sample":
        p = np.exp(lp)
        return int(rng.choice(len(answers), p=p / p.sum())), lp
    raise ValueError(f"unknown answer mode {mode!r}")


def majority_vote(votes: Sequence[int], answers: Sequence[tuple[int, ...]], loglik: np.ndarray) -> int:
    """Modal answer; ties go to the higher summed teacher log-likelihood, then the smaller id tuple."""
    counts = Counter(votes)
    best = max(counts.values())
    tied = [a for a, c in counts.items() if c == best]
    return min(tied, key=lambda a: (-loglik[a], answers[a]))


def posterior_predictive(policy, teacher: TabularLM, x, n_samples: int, rng: np.random.Generator,
                         answers: Sequence[tuple[int, ...]], mode: str = "greedy",
                         temperature: float = 1.0, tool: ToolFn | None = None,
                         condition: Condition | None = None) -> Prediction:
    """Sample latents from the policy, decode an answer for each, and take the majority vote.

    Answers are decoded from the teacher restricted to the finite answer set.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if not answers:
        raise ValueError("empty answer set")
    answers = [tuple(a) for a in answers]
    xs = as_ids(x)
    cond = condition or as_condition(xs)
    trajs = sample_batch(policy, [cond] * n_samples, [temperature] * n_samples, rng, tool)
    votes, latents = [], []
    total = np.zeros(len(answers))
    for t in trajs:
        z = t.sequence.ids
        idx, lp = decode_answer(teacher, xs + z, answers, mode, rng)
        votes.append(idx)
        latents.append(z)
        total += np.maximum(lp, -1e300)
    win = majority_vote(votes, answers, total)
    hist = {answers[a]: c for a, c in sorted(Counter(votes).items())}
    return Prediction(answers[win], hist, latents)


def exact_vote_distribution(policy_dist, teacher: TabularLM, x, answers: Sequence[tuple[int, ...]],
                            mode: str = "sample") -> np.ndarray:
    """Single-sample answer distribution sum_Z q(Z) p(y | XZ) from an enumerated policy distribution."""
    xs = as_ids(x)
    out = np.zeros(len(answers))
    for seq, q in policy_dist.entries.items():
        lp = answer_logprobs(teacher, xs + seq.ids, answers)
        if mode == "sample":
            out += q * np.exp(lp)
        else:
            out[int(np.argmax(lp))] += q
    return out
