"""Likelihood and string-diversity metrics for sampled continuations."""

from __future__ import annotations

import itertools
from typing import Sequence

from ..base_lm import TabularLM
from ..core import TokenSequence, as_ids


def edit_distance(a: Sequence[int], b: Sequence[int]) -> int:
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def normalized_edit_distance(a: Sequence[int], b: Sequence[int]) -> float:
    n = max(len(a), len(b))
    return edit_distance(a, b) / n if n else 0.0


def continuation_metrics(samples: Sequence[TokenSequence], lm: TabularLM, condition=None) -> tuple[float, dict]:
    """Best teacher log-likelihood among samples and (mean pairwise edit distance, distinct fraction)."""
    if not samples:
        raise ValueError("empty sample list")
    x = as_ids(condition)
    seqs = [as_ids(s) for s in samples]
    best = max(lm.continuation_logprob(x, s, terminate=True) for s in seqs)
    pairs = list(itertools.combinations(seqs, 2))
    mean_dist = sum(normalized_edit_distance(a, b) for a, b in pairs) / len(pairs) if pairs else 0.0
    return best, {"mean_pairwise_edit": mean_dist, "distinct_fraction": len(set(seqs)) / len(seqs)}
