"""Decoding baselines over a teacher or a policy: greedy, tempered, top-k, nucleus and beam."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..base_lm import TabularLM
from ..core import TokenSequence, as_ids
from ..policy import as_condition

StepFn = Callable[[tuple[int, ...]], np.ndarray]


@dataclass(frozen=True)
class Method:
    name: str
    value: float = 0.0

    def __post_init__(self) -> None:
        n, v = self.name, self.value
        if n not in ("greedy", "temperature", "top_k", "nucleus", "beam", "ancestral"):
            raise ValueError(f"unknown decoding method {n!r}")
        if n == "temperature" and v <= 0:
            raise ValueError("temperature must be > 0")
        if n in ("top_k", "beam") and (v < 1 or int(v) != v):
            raise ValueError(f"{n} needs an integer >= 1")
        if n == "nucleus" and not 0 < v <= 1:
            raise ValueError("nucleus needs 0 < p <= 1")


def parse_method(text: str) -> Method:
    """'greedy', 'ancestral', 'temperature:T', 'top_k:K', 'nucleus:P' or 'beam:W'."""
    name, _, arg = text.partition(":")
    return Method(name, float(arg) if arg else 0.0)


def stepper(model, condition=None, min_len: int | None = None, max_len: int | None = None) -> tuple[StepFn, int]:
    """Masked next-event log-probabilities for a TabularLM or a policy; returns (fn, max_len)."""
    if isinstance(model, TabularLM):
        x = as_ids(condition)
        lo = 0 if min_len is None else min_len
        hi = 20 if max_len is None else max_len
        V = model.vocab.size

        def fn(prefix):
            row = np.array(model.logprobs(x + prefix))
            if len(prefix) < lo:
                row[V] = -np.inf
            if len(prefix) >= hi:
                row[:V] = -np.inf
            m = row.max()
            return row - (m + np.log(np.exp(row - m).sum()))

        return fn, hi
    cond = as_condition(condition)

    def pfn(prefix):
        logp, _ = model.evaluate([(cond, prefix, None)])
        return logp[0]

    return pfn, model.max_len


def _choose(row: np.ndarray, method: Method, rng: np.random.Generator) -> int:
    name = method.name
    if name == "greedy":
        return int(np.argmax(row))
    logits = row.copy()
    if name == "temperature":
        logits = logits / method.value
    elif name == "top_k":
        k = int(method.value)
        if k < len(logits):
            cut = np.sort(logits)[-k]
            logits[logits < cut] = -np.inf
    elif name == "nucleus" and method.value < 1.0:
        order = np.argsort(-logits, kind="stable")
        p = np.exp(logits[order] - logits.max())
        p /= p.sum()
        keep = np.searchsorted(np.cumsum(p), method.value - 1e-12) + 1
        mask = np.full(len(logits), -np.inf)
        mask[order[:keep]] = 0.0
        logits = logits + mask
    p = np.exp(logits - logits.max())
    p /= p.sum()
    return int(rng.choice(len(p), p=p))


def beam_search(step: StepFn, stop: int, max_len: int, width: int) -> list[tuple[tuple[int, ...], float]]:
    """Beam search where finished hypotheses compete for beam slots; returns top-``width`` finished."""
    beams: list[tuple[float, tuple[int, ...], bool]] = [(0.0, (), False)]
    while any(not done for _, _, done in beams):
        cands = []
        for score, seq, done in beams:
            if done:
                cands.append((score, seq, True))
                continue
            row = step(seq)
            for t in np.flatnonzero(np.isfinite(row)):
                t = int(t)
                if t == stop:
                    cands.append((score + float(row[t]), seq, True))
                else:
                    cands.append((score + float(row[t]), seq + (t,), False))
        cands.sort(key=lambda c: (-c[0], len(c[1]), c[1], not c[2]))
        beams = cands[:width]
    return [(seq, score) for score, seq, _ in beams]


def decode_baselines(model, condition, method: Method | str, rng: np.random.Generator,
                     n: int = 1, min_len: int | None = None, max_len: int | None = None) -> list[TokenSequence]:
    """Decode ``n`` sequences (beam returns its top-w finished hypotheses)."""
    m = parse_method(method) if isinstance(method, str) else method
    step, hi = stepper(model, condition, min_len, max_len)
    vocab = model.vocab
    stop = vocab.size
    if m.name == "beam":
        return [TokenSequence(s, True, vocab=vocab) for s, _ in beam_search(step, stop, hi, int(m.value))]
    out = []
    for _ in range(n if m.name != "greedy" else 1):
        seq: tuple[int, ...] = ()
        while True:
            t = _choose(step(seq), m, rng)
            if t == stop:
                break
            seq += (t,)
        out.append(TokenSequence(seq, True, vocab=vocab))
    if m.name == "greedy":
        out = out * n
    return out
