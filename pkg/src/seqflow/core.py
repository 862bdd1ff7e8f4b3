"""Vocabulary, token sequence and trajectory primitives."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

STOP_TEXT = "<STOP>"


class VocabularyError(ValueError):
    """Raised for malformed vocabularies or out-of-vocabulary tokens."""


@dataclass(frozen=True)
class Vocabulary:
    """Ordered set of token strings; the stop event uses index ``len(tokens)``."""

    tokens: tuple[str, ...]

    def __post_init__(self) -> None:
        tokens = tuple(self.tokens)
        object.__setattr__(self, "tokens", tokens)
        if not tokens:
            raise VocabularyError("vocabulary must contain at least one token")
        for tok in tokens:
            if not isinstance(tok, str) or not tok or any(c.isspace() for c in tok):
                raise VocabularyError(f"invalid token {tok!r}")
            if tok == STOP_TEXT:
                raise VocabularyError(f"{STOP_TEXT} is reserved")
        if len(set(tokens)) != len(tokens):
            raise VocabularyError("tokens must be unique")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(tokens)})

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def stop_id(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def index(self, token: str) -> int:
        try:
            return self._index[token]  # type: ignore[attr-defined]
        except KeyError:
            raise VocabularyError(f"token {token!r} not in vocabulary") from None

    def encode(self, tokens: Iterable[str]) -> tuple[int, ...]:
        return tuple(self.index(t) for t in tokens)

    def decode(self, ids: Iterable[int]) -> tuple[str, ...]:
        return tuple(self.tokens[i] for i in ids)

    def check(self, ids: Iterable[int]) -> None:
        for i in ids:
            if not 0 <= i < len(self.tokens):
                raise VocabularyError(f"id {i} outside vocabulary of size {len(self.tokens)}")

    def seq(self, text: str | Sequence[str], terminated: bool = False) -> "TokenSequence":
        """Build a sequence from whitespace-separated text or a token list."""
        toks = text.split() if isinstance(text, str) else list(text)
        if toks and toks[-1] == STOP_TEXT:
            toks = toks[:-1]
            terminated = True
        return TokenSequence(self.encode(toks), terminated, vocab=self)


@dataclass(frozen=True)
class TokenSequence:
    """Token ids plus a flag recording whether the stop event was emitted.

    The optional ``vocab`` is carried for validation and rendering only and is
    excluded from equality and hashing.
    """

    ids: tuple[int, ...] = ()
    terminated: bool = False
    vocab: Vocabulary | None = field(default=None, compare=False, repr=False)

    def __post_init__(self) -> None:
        ids = tuple(int(i) for i in self.ids)
        object.__setattr__(self, "ids", ids)
        if any(i < 0 for i in ids):
            raise VocabularyError("negative token id")
        if self.vocab is not None:
            self.vocab.check(ids)

    def __len__(self) -> int:
        return len(self.ids)

    def terminate(self) -> "TokenSequence":
        return TokenSequence(self.ids, True, vocab=self.vocab)

    def render(self, vocab: Vocabulary | None = None) -> str:
        return render(self, vocab)


def as_ids(seq: TokenSequence | Sequence[int] | None) -> tuple[int, ...]:
    if seq is None:
        return ()
    if isinstance(seq, TokenSequence):
        return seq.ids
    return tuple(int(i) for i in seq)


def prefix(seq: TokenSequence, i: int) -> TokenSequence:
    """First ``i`` tokens of ``seq``, unterminated."""
    if not 0 <= i <= len(seq.ids):
        raise IndexError(f"prefix index {i} outside [0, {len(seq.ids)}]")
    return TokenSequence(seq.ids[:i], False, vocab=seq.vocab)


def concat(x: TokenSequence, z: TokenSequence, y: TokenSequence) -> TokenSequence:
    """Concatenate three segments; termination is taken from ``y``."""
    vocabs = [s.vocab for s in (x, z, y) if s.vocab is not None]
    for v in vocabs[1:]:
        if v is not vocabs[0] and v != vocabs[0]:
            raise VocabularyError("vocabulary mismatch between segments")
    if x.terminated or z.terminated:
        raise ValueError("only the final segment may be terminated")
    return TokenSequence(x.ids + z.ids + y.ids, y.terminated, vocab=vocabs[0] if vocabs else None)


def render(seq: TokenSequence, vocab: Vocabulary | None = None) -> str:
    """Whitespace-joined token strings, with the stop event as ``<STOP>``."""
    vocab = vocab or seq.vocab
    if vocab is None:
        raise VocabularyError("a vocabulary is required to render a sequence")
    parts = list(vocab.decode(seq.ids))
    if seq.terminated:
        parts.append(STOP_TEXT)
    return " ".join(parts)


def parse(text: str, vocab: Vocabulary) -> TokenSequence:
    return vocab.seq(text)


class Source(str, enum.Enum):
    ON_POLICY = "on_policy"
    TEMPERED = "tempered"
    REPLAY = "replay"


@dataclass(frozen=True)
class Trajectory:
    """A sampled terminal sequence with the policy log-probabilities along its path.

    ``forced[i]`` marks tokens appended by the environment (probability one,
    log-probability zero); states right before a forced token cannot stop, so
    their ``stop_logprobs`` entry is ``-inf``. ``rejected`` marks a trajectory
    ended by the environment rather than by the policy.
    """

    sequence: TokenSequence
    step_logprobs: tuple[float, ...]
    stop_logprobs: tuple[float, ...]
    source: Source = Source.ON_POLICY
    forced: tuple[bool, ...] = ()
    rejected: bool = False
    temperature: float = 1.0

    def __post_init__(self) -> None:
        n = len(self.sequence.ids)
        object.__setattr__(self, "step_logprobs", tuple(float(v) for v in self.step_logprobs))
        object.__setattr__(self, "stop_logprobs", tuple(float(v) for v in self.stop_logprobs))
        forced = tuple(bool(f) for f in self.forced) or (False,) * n
        object.__setattr__(self, "forced", forced)
        if len(self.step_logprobs) != n:
            raise ValueError("step_logprobs must have one entry per token")
        if len(self.stop_logprobs) != n + 1:
            raise ValueError("stop_logprobs must have one entry per prefix")
        if len(forced) != n:
            raise ValueError("forced mask must have one entry per token")
        for v in self.step_logprobs:
            if not (v <= 0.0 and math.isfinite(v)):
                raise ValueError(f"invalid step log-probability {v}")
        for v in self.stop_logprobs:
            if not v <= 0.0:
                raise ValueError(f"invalid stop log-probability {v}")

    @property
    def log_prob(self) -> float:
        """log q of the full terminal sequence under the recording policy."""
        if self.rejected:
            return sum(self.step_logprobs)
        return sum(self.step_logprobs) + self.stop_logprobs[-1]

    def decision_points(self) -> list[int]:
        """Prefix lengths at which the policy acts (positions not followed by a forced token)."""
        n = len(self.sequence.ids)
        return [i for i in range(n + 1) if i == n or not self.forced[i]]
