import math

import numpy as np
import pytest
from conftest import random_lm, random_policy
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from seqflow.base_lm import fit_ngram
from seqflow.core import TokenSequence, Vocabulary, concat, prefix
from seqflow.oracle import (
    Bounds,
    entropy,
    enumerate_terminals,
    exact_policy_terminal,
    kl,
    logsumexp_pairwise,
    marginal_likelihood,
    tv,
)
from seqflow.policy import Condition, policy_logprobs
from seqflow.tasks import arithmetic as ar
from seqflow.training import Schedule, schedule_value

ABC = Vocabulary(("a", "b", "c"))
ids = st.lists(st.integers(0, 2), max_size=6).map(tuple)
dists = st.lists(st.floats(0.0, 1.0), min_size=2, max_size=8).filter(lambda v: sum(v) > 1e-3)
PROPS = settings(max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])


@given(ids, ids, ids, st.booleans())
def test_concat_is_associative(x, z, y, term):
    a = concat(concat(TokenSequence(x), TokenSequence(z), TokenSequence(())), TokenSequence(()), TokenSequence(y, term))
    b = concat(TokenSequence(x), concat(TokenSequence(z), TokenSequence(y), TokenSequence(())), TokenSequence((), term))
    assert a.ids == b.ids == x + z + y and a.terminated == b.terminated == term


@given(ids, st.booleans())
def test_prefix_endpoints(x, term):
    s = TokenSequence(x, term)
    assert prefix(s, len(x)).ids == x and prefix(s, 0).ids == ()
    with pytest.raises(IndexError):
        prefix(s, len(x) + 1)


@given(st.lists(st.lists(st.integers(0, 2), max_size=4), min_size=1, max_size=6), st.integers(1, 3),
       st.floats(0.0, 2.0), ids.filter(lambda t: len(t) <= 4))
@PROPS
def test_fitted_conditionals_normalize(corpus, order, alpha, ctx):
    lm = fit_ngram([ABC.encode([ABC.tokens[i] for i in s]) for s in corpus], order, alpha, ABC)
    assert abs(np.exp(lm.logprobs(ctx)).sum() - 1.0) < 1e-9


@given(st.integers(0, 50), st.integers(1, 3), ids.filter(lambda t: len(t) <= 3))
@PROPS
def test_policy_logprobs_normalize(seed, context_k, pre):
    pol = random_policy(random_lm(ABC, seed, order=2), seed, scale=1.0, context_k=context_k, hidden=8,
                        min_len=1, max_len=4)
    p = np.exp(policy_logprobs(pol, Condition((seed % 3,)), pre))
    assert abs(p.sum() - 1.0) < 1e-9


@given(st.integers(0, 50))
@settings(max_examples=10, deadline=None)
def test_policy_terminal_distribution_normalizes(seed):
    pol = random_policy(random_lm(ABC, seed), seed, scale=1.0, hidden=8, min_len=0, max_len=3)
    d = exact_policy_terminal(pol, Condition(), Bounds(0, 3))
    assert abs(sum(d.entries.values()) - 1.0) < 1e-6


@given(dists, st.data())
def test_divergences_are_bounded(p, data):
    q = data.draw(st.lists(st.floats(1e-3, 1.0), min_size=len(p), max_size=len(p)))
    p, q = np.array(p) / sum(p), np.array(q) / sum(q)
    assert kl(p, q) >= -1e-12 and kl(p, p) == pytest.approx(0.0, abs=1e-12)
    assert 0.0 <= tv(p, q) <= 1.0 + 1e-12
    assert -1e-12 <= entropy(p) <= math.log(len(p)) + 1e-12


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=40), st.randoms(use_true_random=False))
def test_logsumexp_is_order_invariant(v, rnd):
    shuffled = list(v)
    rnd.shuffle(shuffled)
    a = logsumexp_pairwise(v)
    assert abs(a - logsumexp_pairwise(shuffled)) < 1e-12 * max(1.0, abs(a))
    k = len(v) // 2
    split = logsumexp_pairwise([logsumexp_pairwise(v[:k]) if k else -math.inf, logsumexp_pairwise(v[k:])])
    assert abs(a - split) < 1e-12 * max(1.0, abs(a))


@given(st.integers(0, 30), ids.filter(lambda t: len(t) <= 2), ids.filter(lambda t: len(t) <= 2))
@settings(max_examples=20, deadline=None)
def test_marginal_likelihood_is_a_sum_over_latents(seed, x, y):
    lm = random_lm(ABC, seed, order=2)
    want = [lm.continuation_logprob(x, z.ids + y, terminate=True) for z in enumerate_terminals(ABC, 0, 2)]
    assert marginal_likelihood(lm, x, y, Bounds(0, 2)) == pytest.approx(logsumexp_pairwise(want), abs=1e-12)


@given(st.floats(0.1, 3.0), st.floats(0.1, 3.0), st.integers(1, 500))
def test_schedule_is_monotone(start, end, horizon):
    s = Schedule(start, end, horizon)
    vals = [schedule_value(s, t) for t in range(0, horizon + 20, max(1, horizon // 25))]
    step = np.diff(vals)
    assert np.all(step <= 1e-12) if end <= start else np.all(step >= -1e-12)
    assert schedule_value(s, horizon + 100) == pytest.approx(end)


@given(st.integers(0, 99), st.sampled_from("+-"), st.integers(0, 9))
def test_calculator_extends_input(a, op, b):
    text = " ".join(str(a)) + f" {op} {b} ="
    seq = tuple(text.split())
    out = ar.VOCAB.decode(ar.calculator_step(seq).ids)
    assert out[:len(seq)] == seq
    assert out[len(seq):] == ar.number_tokens(a + b if op == "+" else a - b)


@given(st.integers(2, 5), st.integers(0, 2 ** 32 - 1))
@settings(max_examples=25, deadline=None)
def test_dataset_answers_are_left_to_right(n_ops, seed):
    for p in ar.gen_arithmetic_dataset(n_ops, 5, rng=seed):
        acc = p.operands[0]
        for op, v in zip(p.operators, p.operands[1:]):
            acc = acc + v if op == "+" else acc - v
        assert p.answer_value == acc == ar.parse_answer(p.answer_tokens)
        assert all(0 <= v <= 9 for v in p.operands) and len(p.operands) == n_ops
