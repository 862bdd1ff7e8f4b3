"""Tabular n-gram teacher model with additive smoothing."""

from __future__ import annotations

import hashlib
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import TokenSequence, Vocabulary, VocabularyError, as_ids, concat

BOS = -1
FORMAT_VERSION = 1


class CorpusError(ValueError):
    """Tokenization failure with a 1-based line and column."""

    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


@dataclass(frozen=True, eq=False)
class TabularLM:
    """n-gram model: context window of ``order`` tokens -> distribution over V + stop.

    ``table`` holds only observed contexts; any other context uses the smoothed
    fallback, which is uniform for every ``alpha`` (with ``alpha = 0`` an unseen
    context has no counts, so the uniform distribution is used as well).
    """

    order: int
    vocab: Vocabulary
    alpha: float
    table: Mapping[tuple[int, ...], np.ndarray]
    _cache: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self) -> None:
        if self.order < 1:
            raise ValueError("order must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        width = self.vocab.size + 1
        for ctx, dist in self.table.items():
            if len(ctx) != self.order or dist.shape != (width,):
                raise ValueError(f"malformed table entry for context {ctx}")
            if np.any(dist < 0) or abs(dist.sum() - 1.0) > 1e-12:
                raise ValueError(f"distribution for context {ctx} is not normalized")

    @property
    def width(self) -> int:
        return self.vocab.size + 1

    def context(self, ids: Sequence[int]) -> tuple[int, ...]:
        padded = (BOS,) * self.order + tuple(ids)
        return padded[len(padded) - self.order:]

    def dist(self, ids: Sequence[int]) -> np.ndarray:
        ctx = self.context(ids)
        d = self.table.get(ctx)
        if d is None:
            d = np.full(self.width, 1.0 / self.width)
        return d

    def logprobs(self, ids: Sequence[int]) -> np.ndarray:
        """Log-distribution over V + stop after the token ids ``ids`` (cached per context)."""
        ctx = self.context(ids)
        out = self._cache.get(ctx)
        if out is None:
            with np.errstate(divide="ignore"):
                out = np.log(self.dist(ctx))
            out.setflags(write=False)
            self._cache[ctx] = out
        return out

    def continuation_logprob(self, context: Sequence[int], ids: Sequence[int],
                             terminate: bool = True) -> float:
        """log p(ids [, stop] | context) by the chain rule."""
        hist = list(context)
        total = 0.0
        for t in ids:
            total += float(self.logprobs(hist)[t])
            hist.append(t)
        if terminate:
            total += float(self.logprobs(hist)[self.vocab.stop_id])
        return total

    def checksum(self) -> str:
        return hashlib.sha256(to_text(self).encode()).hexdigest()


def _fit_weighted(weighted: Iterable[tuple[Sequence[int], float]], order: int,
                  alpha: float, vocab: Vocabulary) -> TabularLM:
    width = vocab.size + 1
    counts: dict[tuple[int, ...], np.ndarray] = defaultdict(lambda: np.zeros(width))
    for ids, w in weighted:
        if w == 0:
            continue
        hist = (BOS,) * order
        for t in list(ids) + [vocab.stop_id]:
            counts[hist][t] += w
            hist = hist[1:] + (t,)
    table = {}
    for ctx in sorted(counts):
        c = counts[ctx]
        table[ctx] = (c + alpha) / (c.sum() + alpha * width)
    return TabularLM(order, vocab, float(alpha), table)


def fit_ngram(corpus: Sequence[TokenSequence | Sequence[int]], order: int, alpha: float = 0.1,
              vocab: Vocabulary | None = None) -> TabularLM:
    """Additively smoothed maximum-likelihood n-gram fit; a stop is counted after each sequence."""
    if order < 1:
        raise ValueError("order must be >= 1")
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    if alpha == 0 and not corpus:
        raise ValueError("an empty corpus requires alpha > 0")
    if vocab is None:
        vocabs = [s.vocab for s in corpus if isinstance(s, TokenSequence) and s.vocab is not None]
        if not vocabs:
            raise ValueError("vocabulary required")
        vocab = vocabs[0]
    seqs = [as_ids(s) for s in corpus]
    for s in seqs:
        vocab.check(s)
    return _fit_weighted(((s, 1.0) for s in seqs), order, alpha, vocab)


def cond_logprobs(lm: TabularLM, prefix: TokenSequence | Sequence[int]) -> np.ndarray:
    if isinstance(prefix, TokenSequence) and prefix.terminated:
        raise ValueError("prefix must be unterminated")
    return lm.logprobs(as_ids(prefix))


def log_prob_seq(lm: TabularLM, seq: TokenSequence) -> float:
    if not seq.terminated:
        raise ValueError("sequence must be terminated")
    return lm.continuation_logprob((), seq.ids, terminate=True)


def joint_log_prob(lm: TabularLM, x: TokenSequence, z: TokenSequence, y: TokenSequence) -> float:
    return log_prob_seq(lm, concat(x, z, y))


def m_step_update(lm: TabularLM, samples: Sequence[tuple]) -> TabularLM:
    """Weighted refit on concatenated (x, z, y) triples; weights are fractional counts."""
    weighted = []
    for x, z, y, w in samples:
        if w < 0:
            raise ValueError("weights must be nonnegative")
        weighted.append((as_ids(x) + as_ids(z) + as_ids(y), float(w)))
    if not any(w > 0 for _, w in weighted):
        raise ValueError("all weights are zero")
    for ids, _ in weighted:
        lm.vocab.check(ids)
    return _fit_weighted(weighted, lm.order, lm.alpha, lm.vocab)


# --- serialization -----------------------------------------------------------

def to_text(lm: TabularLM) -> str:
    entries = []
    for ctx in sorted(lm.table):
        entries.append({"context": list(ctx), "probs": [float(p).hex() for p in lm.table[ctx]]})
    doc = {
        "format": "seqflow-tabular-lm",
        "version": FORMAT_VERSION,
        "order": lm.order,
        "alpha": float(lm.alpha).hex(),
        "vocab": list(lm.vocab.tokens),
        "entries": entries,
    }
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def from_text(text: str) -> TabularLM:
    doc = json.loads(text)
    if doc.get("format") != "seqflow-tabular-lm" or doc.get("version") != FORMAT_VERSION:
        raise ValueError("unsupported teacher checkpoint")
    vocab = Vocabulary(tuple(doc["vocab"]))
    table = {tuple(e["context"]): np.array([float.fromhex(p) for p in e["probs"]])
             for e in doc["entries"]}
    return TabularLM(int(doc["order"]), vocab, float.fromhex(doc["alpha"]), table)


def save_lm(lm: TabularLM, path: str | Path) -> str:
    text = to_text(lm)
    Path(path).write_text(text)
    return hashlib.sha256(text.encode()).hexdigest()


def load_lm(path: str | Path) -> TabularLM:
    return from_text(Path(path).read_text())


def read_corpus(path: str | Path, vocab: Vocabulary | None = None) -> tuple[list[TokenSequence], Vocabulary]:
    """One whitespace-tokenized sequence per line; builds the vocabulary if not given."""
    lines = Path(path).read_text().splitlines()
    if vocab is None:
        seen: dict[str, None] = {}
        for line in lines:
            for tok in line.split():
                seen.setdefault(tok, None)
        try:
            vocab = Vocabulary(tuple(seen))
        except VocabularyError as e:
            raise CorpusError(str(e), 1, 1) from None
    out = []
    for lineno, line in enumerate(lines, 1):
        ids = []
        col = 0
        for tok in line.split():
            col = line.index(tok, col)
            try:
                ids.append(vocab.index(tok))
            except VocabularyError:
                raise CorpusError(f"unknown token {tok!r}", lineno, col + 1) from None
            col += len(tok)
        out.append(TokenSequence(tuple(ids), True, vocab=vocab))
    return out, vocab


def held_out_log_likelihood(lm: TabularLM, corpus: Sequence[TokenSequence]) -> float:
    return math.fsum(log_prob_seq(lm, s.terminate() if not s.terminated else s) for s in corpus)
