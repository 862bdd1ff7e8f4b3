"""Brute-force ground truth over enumerable sequence spaces."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterator, Mapping, Sequence

import numpy as np

from .base_lm import TabularLM
from .core import TokenSequence, Vocabulary, as_ids, render
from .objective import log_reward_of
from .policy import TablePolicy, as_condition

DEFAULT_CAP = 2_000_000


class EnumerationCapError(RuntimeError):
    pass


@dataclass(frozen=True)
class Bounds:
    min_len: int
    max_len: int

    def __post_init__(self) -> None:
        if not 0 <= self.min_len <= self.max_len:
            raise ValueError("need 0 <= min_len <= max_len")


def as_bounds(b) -> Bounds:
    if isinstance(b, Bounds):
        return b
    return Bounds(int(b[0]), int(b[1]))


def _vocab_size(vocab) -> int:
    return vocab.size if isinstance(vocab, Vocabulary) else int(vocab)


def count_terminals(n_tokens: int, min_len: int, max_len: int) -> int:
    return sum(n_tokens ** length for length in range(min_len, max_len + 1))


def _check_cap(n_tokens: int, min_len: int, max_len: int, cap: int) -> None:
    total = 0
    for length in range(min_len, max_len + 1):
        total += n_tokens ** length
        if total > cap:
            raise EnumerationCapError(f"more than {cap} sequences in lengths [{min_len}, {max_len}]")


def enumerate_terminals(vocab, min_len: int, max_len: int, cap: int = DEFAULT_CAP) -> Iterator[TokenSequence]:
    """Every terminated sequence with length in [min_len, max_len], shortlex order."""
    V = _vocab_size(vocab)
    _check_cap(V, min_len, max_len, cap)
    voc = vocab if isinstance(vocab, Vocabulary) else None
    for length in range(min_len, max_len + 1):
        for ids in itertools.product(range(V), repeat=length):
            yield TokenSequence(ids, True, vocab=voc)


def logsumexp_pairwise(values) -> float:
    """log-sum-exp with a fixed pairwise reduction tree (order-stable)."""
    a = np.asarray(values, dtype=np.float64).ravel()
    if a.size == 0:
        return -math.inf
    while a.size > 1:
        if a.size % 2:
            a = np.append(a, -np.inf)
        a = np.logaddexp(a[0::2], a[1::2])
    return float(a[0])


@dataclass(frozen=True)
class TerminalDistribution:
    """Normalized distribution over terminal sequences, in shortlex order."""

    entries: Mapping[TokenSequence, float]
    support_size: int
    log_partition: float

    def prob(self, seq: TokenSequence | Sequence[int]) -> float:
        key = seq if isinstance(seq, TokenSequence) else TokenSequence(tuple(seq), True)
        return self.entries.get(key, 0.0)

    def to_lines(self, vocab: Vocabulary) -> list[str]:
        return [f"{render(s, vocab)}\t{p!r}" for s, p in self.entries.items()]


def _from_logs(seqs: list[TokenSequence], logs: np.ndarray, log_partition: float | None = None
               ) -> TerminalDistribution:
    logz = logsumexp_pairwise(logs)
    if not logz > -math.inf:
        raise ValueError("all rewards are zero on the enumerated space")
    probs = np.exp(logs - logz)
    entries = {s: float(p) for s, p in zip(seqs, probs) if p > 0}
    return TerminalDistribution(entries, len(entries), logz if log_partition is None else log_partition)


def exact_target(spec, bounds, vocab: Vocabulary | int | None = None, cap: int = DEFAULT_CAP
                 ) -> TerminalDistribution:
    """Reward-proportional distribution over the bounded space."""
    b = as_bounds(bounds)
    if vocab is None:
        vocab = spec.teacher.vocab
    fn = log_reward_of(spec)
    seqs = list(enumerate_terminals(vocab, b.min_len, b.max_len, cap))
    logs = np.array([fn(s.ids) for s in seqs], dtype=np.float64)
    return _from_logs(seqs, logs)


def _levels(V: int, max_len: int):
    """Prefix tuples per length in lexicographic order."""
    return [list(itertools.product(range(V), repeat=length)) for length in range(max_len + 1)]


def exact_policy_terminal(policy, condition=None, bounds=None, cap: int = DEFAULT_CAP,
                          chunk: int = 50_000) -> TerminalDistribution:
    """Terminal distribution induced by the policy's masked conditionals."""
    V = policy.vocab.size
    max_len = policy.max_len if bounds is None else as_bounds(bounds).max_len
    _check_cap(V, 0, max_len, cap)
    cond = as_condition(condition)
    seqs: list[TokenSequence] = []
    logs: list[np.ndarray] = []
    cum = np.zeros(1)
    for length, level in enumerate(_levels(V, max_len)):
        rows = []
        for s in range(0, len(level), chunk):
            states = [(cond, p, None) for p in level[s:s + chunk]]
            lp, _ = policy.evaluate(states)
            rows.append(lp)
        lp = np.concatenate(rows)
        seqs.extend(TokenSequence(p, True, vocab=policy.vocab) for p in level)
        logs.append(cum + lp[:, V])
        if length < max_len:
            cum = (cum[:, None] + lp[:, :V]).ravel()
    logs_arr = np.concatenate(logs)
    return _from_logs(seqs, logs_arr, 0.0)


def _as_prob_vectors(p, q) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(p, TerminalDistribution) or isinstance(q, TerminalDistribution):
        pe = p.entries if isinstance(p, TerminalDistribution) else dict(p)
        qe = q.entries if isinstance(q, TerminalDistribution) else dict(q)
        keys = list(dict.fromkeys(list(pe) + list(qe)))
        return (np.array([pe.get(k, 0.0) for k in keys]), np.array([qe.get(k, 0.0) for k in keys]))
    if isinstance(p, Mapping):
        keys = list(dict.fromkeys(list(p) + list(q)))
        return np.array([p.get(k, 0.0) for k in keys]), np.array([q.get(k, 0.0) for k in keys])
    pa, qa = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    if pa.shape != qa.shape:
        raise ValueError("distributions must share a domain")
    return pa, qa


def kl(p, q) -> float:
    """KL(p || q) in nats."""
    pa, qa = _as_prob_vectors(p, q)
    pos = pa > 0
    if np.any(qa[pos] <= 0):
        raise ValueError("support of p is not contained in support of q")
    return float(max(0.0, math.fsum(pa[pos] * (np.log(pa[pos]) - np.log(qa[pos])))))


def tv(p, q) -> float:
    pa, qa = _as_prob_vectors(p, q)
    return float(0.5 * np.abs(pa - qa).sum())


def entropy(p) -> float:
    pa = np.array(list(p.entries.values())) if isinstance(p, TerminalDistribution) else np.asarray(p)
    pa = pa[pa > 0]
    return float(-(pa * np.log(pa)).sum())


def latent_log_weights(teacher: TabularLM, x, y, bounds, cap: int = DEFAULT_CAP, terminate: bool = True):
    """Latent sequences Z with log p(Z|X) + log p(Y|XZ), shortlex order."""
    b = as_bounds(bounds)
    xs, ys = as_ids(x), as_ids(y)
    if isinstance(y, TokenSequence):
        terminate = y.terminated
    zs = list(enumerate_terminals(teacher.vocab, b.min_len, b.max_len, cap))
    logs = np.empty(len(zs))
    for k, z in enumerate(zs):
        prior = teacher.continuation_logprob(xs, z.ids, terminate=False)
        like = teacher.continuation_logprob(xs + z.ids, ys, terminate=terminate)
        logs[k] = prior + like
    return zs, logs


def marginal_likelihood(teacher: TabularLM, x, y, bounds, cap: int = DEFAULT_CAP) -> float:
    """log sum_Z p(Z|X) p(Y|XZ) over the bounded latent space."""
    _, logs = latent_log_weights(teacher, x, y, bounds, cap)
    return logsumexp_pairwise(logs)


def exact_posterior_policy(spec, bounds, vocab: Vocabulary | None = None,
                           cap: int = DEFAULT_CAP) -> TablePolicy:
    """Stepwise conditionals whose terminal distribution is exactly reward-proportional.

    q(t | s) = M(s t) / M(s) and q(stop | s) = R(s stop) / M(s), where M(s) is the
    total reward of terminals extending s. Prefixes that cannot stop keep log M(s)
    as their flow; zero-mass prefixes are left out of the table.
    """
    b = as_bounds(bounds)
    if vocab is None:
        vocab = spec.teacher.vocab
    V = vocab.size
    _check_cap(V, 0, b.max_len, cap)
    fn = log_reward_of(spec)
    levels = _levels(V, b.max_len)
    log_r = []
    for length, level in enumerate(levels):
        if length < b.min_len:
            log_r.append(np.full(len(level), -np.inf))
        else:
            log_r.append(np.array([fn(p) for p in level], dtype=np.float64))
    mass = [None] * (b.max_len + 1)
    mass[b.max_len] = log_r[b.max_len]
    for length in range(b.max_len - 1, -1, -1):
        child = mass[length + 1].reshape(-1, V)
        mass[length] = np.logaddexp(log_r[length], np.logaddexp.reduce(child, axis=1))
    if not mass[0][0] > -np.inf:
        raise ValueError("zero-mass prefix: the root has no reward mass")
    table = {}
    with np.errstate(invalid="ignore"):
        for length, level in enumerate(levels):
            m = mass[length]
            for k, p in enumerate(level):
                if not m[k] > -np.inf:
                    continue
                row = np.empty(V + 1)
                if length < b.max_len:
                    row[:V] = mass[length + 1][k * V:(k + 1) * V] - m[k]
                else:
                    row[:V] = -np.inf
                row[V] = log_r[length][k] - m[k]
                table[p] = (row, float(m[k]))
    return TablePolicy(vocab, table, b.min_len, b.max_len)


def dump_lines(dist: TerminalDistribution, vocab: Vocabulary) -> str:
    return "".join(line + "\n" for line in dist.to_lines(vocab))
