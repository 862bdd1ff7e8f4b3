import math

import numpy as np
import pytest

from seqflow.base_lm import TabularLM, fit_ngram
from seqflow.core import Vocabulary
from seqflow.policy import DeltaPolicy, PolicyConfig


@pytest.fixture
def ab() -> Vocabulary:
    return Vocabulary(("a", "b"))


@pytest.fixture
def abc() -> Vocabulary:
    return Vocabulary(("a", "b", "c"))


@pytest.fixture
def fitted(abc) -> TabularLM:
    """Order-1 fit of [[a, b], [a, c]] with no smoothing."""
    return fit_ngram([abc.encode("a b".split()), abc.encode("a c".split())], 1, 0.0, abc)


def uniform_lm(vocab: Vocabulary, order: int = 1) -> TabularLM:
    return fit_ngram([], order, 1.0, vocab)


def random_lm(vocab: Vocabulary, seed: int, order: int = 1, concentration: float = 1.0) -> TabularLM:
    """Dense random table over every context of the given order."""
    rng = np.random.default_rng(seed)
    W = vocab.size + 1
    from itertools import product

    from seqflow.base_lm import BOS
    alphabet = [BOS] + list(range(vocab.size))
    table = {ctx: rng.dirichlet(np.full(W, concentration)) for ctx in product(alphabet, repeat=order)}
    return TabularLM(order, vocab, 0.0, table)


def random_policy(teacher: TabularLM, seed: int, scale: float = 0.5, **cfg) -> DeltaPolicy:
    """Policy with every weight (including the zero-initialized output layer) randomized."""
    pol = DeltaPolicy(teacher, PolicyConfig(**cfg), seed=seed)
    rng = np.random.default_rng(seed + 1000)
    return pol.with_params(rng.normal(0.0, scale, pol.n_params))


def logsumexp(v) -> float:
    v = [x for x in v if x > -math.inf]
    if not v:
        return -math.inf
    m = max(v)
    return m + math.log(sum(math.exp(x - m) for x in v))


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
