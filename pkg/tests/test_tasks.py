import math
from collections import Counter

import numpy as np
import pytest
from conftest import random_lm

from seqflow.base_lm import BOS, TabularLM, log_prob_seq
from seqflow.core import TokenSequence, Vocabulary
from seqflow.oracle import (
    Bounds,
    enumerate_terminals,
    exact_policy_terminal,
    exact_target,
)
from seqflow.policy import (
    Condition,
    DeltaPolicy,
    PolicyConfig,
    ToolRejection,
)
from seqflow.tasks import arithmetic as ar
from seqflow.tasks.decoding import decode_baselines, parse_method
from seqflow.tasks.em import EMConfig, em_loop, exact_m_step, total_log_marginal
from seqflow.tasks.metrics import (
    continuation_metrics,
    edit_distance,
    normalized_edit_distance,
)
from seqflow.tasks.predictive import (
    exact_vote_distribution,
    majority_vote,
    posterior_predictive,
)
from seqflow.tasks.rewards import (
    Constrained,
    Contrastive,
    Infill,
    TargetDensity,
    TemperedContinuation,
    eval_reward,
    parse_constraint,
)
from seqflow.tasks.synthetic import latent_class_task

V = ar.VOCAB


def toks(text):
    return tuple(text.split())


# --- rewards ---------------------------------------------------------------------------------

def test_tempered_identity(abc):
    lm = random_lm(abc, 0, order=2)
    spec = TemperedContinuation(teacher=lm, x=(1,), T=1.0)
    for z in [(), (0, 2)]:
        assert eval_reward(spec, z) == lm.continuation_logprob((1,), z)
    low = TemperedContinuation(teacher=lm, x=(1,), T=0.5)
    assert eval_reward(low, (0, 2)) == pytest.approx(2 * lm.continuation_logprob((1,), (0, 2)))


def test_contrastive_degenerate_exponents(abc):
    lm = random_lm(abc, 1)
    spec = Contrastive(teacher=lm, x=(2,), alpha=1.0, beta=0.0)
    assert eval_reward(spec, (0, 1)) == lm.continuation_logprob((), (2, 0, 1))
    both = Contrastive(teacher=lm, x=(2,), alpha=1.0, beta=-0.5)
    assert eval_reward(both, (0,)) == pytest.approx(lm.continuation_logprob((), (2, 0))
                                                    - 0.5 * lm.continuation_logprob((), (0,)))


def test_constrained_target_is_renormalized_restriction(abc):
    lm = random_lm(abc, 2)
    c = parse_constraint("must-contain:b", abc.tokens)
    spec = Constrained(teacher=lm, x=(0,), constraint=c)
    d = exact_target(spec, Bounds(0, 3), abc)
    allowed = {s.ids: math.exp(lm.continuation_logprob((0,), s.ids)) for s in enumerate_terminals(abc, 0, 3)
               if 1 in s.ids}
    total = sum(allowed.values())
    assert set(s.ids for s in d.entries) == set(allowed)
    for z, p in allowed.items():
        assert d.prob(z) == pytest.approx(p / total, rel=1e-9)


def test_named_constraints(abc):
    assert parse_constraint("max-length:2", abc.tokens)((0, 1)) == 1.0
    assert parse_constraint("max-length:2", abc.tokens)((0, 1, 2)) == 0.0
    assert parse_constraint("regular-pattern:a( b)*", abc.tokens)((0, 1, 1)) == 1.0
    assert parse_constraint("regular-pattern:a( b)*", abc.tokens)((0, 2)) == 0.0
    with pytest.raises(ValueError):
        parse_constraint("nope:1", abc.tokens)


def test_target_density_and_temperature(abc):
    spec = TargetDensity(table={(0,): -1.0})
    assert eval_reward(spec, (1,)) == -math.inf
    assert eval_reward(spec.with_temperature(0.5), (0,)) == -2.0
    with pytest.raises(ValueError):
        spec.with_temperature(0.0)


@pytest.mark.parametrize("seed", range(3))
def test_infill_target_consistency(abc, seed):
    lm = random_lm(abc, seed, order=2)
    d = exact_target(Infill(teacher=lm, x=(0,), y=(1, 2)), Bounds(0, 3), abc)
    joint = {s.ids: math.exp(log_prob_seq(lm, TokenSequence((0,) + s.ids + (1, 2), True)))
             for s in enumerate_terminals(abc, 0, 3)}
    total = sum(joint.values())
    for z, p in joint.items():
        assert abs(d.prob(z) - p / total) < 1e-9


# --- calculator and arithmetic data ------------------------------------------------------------

def test_calculator_examples():
    assert V.decode(ar.calculator_step(toks("9 + 4 =")).ids) == toks("9 + 4 = 1 3")
    assert V.decode(ar.calculator_step(toks("1 3 - 8 =")).ids) == toks("1 3 - 8 = 5")
    assert V.decode(ar.calculator_step(toks("9 + 4 - 8 =")).ids)[-2:] == (ar.NEG, "4")
    assert ar.calculator_result(toks("9 + 4 = 1 3 , 1 3 - 8 =")) == 5
    assert ar.calculator_result((ar.NEG,) + toks("4 - 1 =")) == -5
    for bad in ["=", "9 =", "+ 4 =", "9 + ="]:
        with pytest.raises(ToolRejection):
            ar.calculator_result(toks(bad))


def test_calculator_extends_its_input():
    seq = toks("3 + 4 = 7 , 7 - 9 =")
    out = V.decode(ar.calculator_step(seq).ids)
    assert out[:len(seq)] == seq and len(out) > len(seq)


class ScriptedPolicy:
    """Deterministic policy that emits a fixed token script, then stops."""

    def __init__(self, script):
        self.script = [V.index(t) for t in script]
        self.vocab = V
        self.max_len = 40
        self.min_len = 0

    def evaluate(self, states):
        rows = []
        for _, prefix, forced in states:
            chosen = sum(1 for f in (forced or ()) if not f)
            row = np.full(V.size + 1, -np.inf)
            row[self.script[chosen] if chosen < len(self.script) else V.stop_id] = 0.0
            rows.append(row)
        return np.array(rows), np.zeros(len(states))


def test_sample_with_tool_fills_results():
    pol = ScriptedPolicy(toks("9 + 4 = , 1 3 - 8 ="))
    t = ar.sample_with_tool(pol, Condition(), 1.0, np.random.default_rng(0))
    assert V.decode(t.sequence.ids) == toks("9 + 4 = 1 3 , 1 3 - 8 = 5")
    assert sum(t.sequence.forced if hasattr(t.sequence, "forced") else t.forced) == 3
    assert len([f for f in t.forced if not f]) == 10
    assert all(lp == 0.0 for lp, f in zip(t.step_logprobs, t.forced) if f)
    assert not t.rejected and ar.tool_consistent(t.sequence.ids)


def test_sample_with_tool_empty_and_rejection():
    assert ar.sample_with_tool(ScriptedPolicy(()), Condition(), 1.0, np.random.default_rng(0)).sequence.ids == ()
    t = ar.sample_with_tool(ScriptedPolicy(("=",)), Condition(), 1.0, np.random.default_rng(0))
    assert t.rejected


def test_problem_format():
    p = ar.ArithmeticProblem((6, 0, 4, 8), ("-", "-", "-"))
    assert p.answer_value == -6
    assert p.rationale_tokens == toks("6 - 0 = 6 , 6 - 4 = 2 , 2 - 8 =") + (ar.NEG, "6")
    assert p.render() == "Question: 6 - 0 - 4 - 8 = ? Answer:"
    assert p.answer_tokens == (".", "The", "answer", "is", ar.NEG, "6", ".")
    assert ar.parse_answer(p.answer_tokens) == -6
    two = ar.ArithmeticProblem((3, 5), ("+",))
    assert two.rationale_tokens == toks("3 + 5 = 8") and two.rationale_tokens.count("=") == 1


def test_dataset_determinism_and_answers():
    a = ar.gen_arithmetic_dataset(3, 1000, rng=7)
    assert a == ar.gen_arithmetic_dataset(3, 1000, rng=7)
    for p in a:
        assert p.answer_value == eval(" ".join(str(v) for pair in zip(("+",) + p.operators, p.operands)
                                                for v in pair))
        assert ar.tool_consistent(V.encode(p.rationale_tokens))
    with pytest.raises(ValueError):
        ar.gen_arithmetic_dataset(1, 3)


def test_dataset_file_roundtrip(tmp_path):
    probs = ar.gen_arithmetic_dataset([2, 3], 5, rng=0)
    ar.write_dataset(tmp_path / "d.tsv", probs, with_rationale=True)
    rows = ar.read_dataset(tmp_path / "d.tsv")
    assert [r[0] for r in rows] == [V.encode(p.question_tokens) for p in probs]
    assert [r[1] for r in rows] == [V.encode(p.rationale_tokens) for p in probs]
    ar.write_dataset(tmp_path / "q.tsv", probs, with_rationale=False)
    assert all(r[1] == () for r in ar.read_dataset(tmp_path / "q.tsv"))


def test_tool_trace_flags_miscopies():
    good = V.encode(toks("2 + 2 = 4"))
    assert ar.tool_trace(good) == (True, (False,) * 4 + (True,))
    assert not ar.tool_consistent(V.encode(toks("2 + 2 = 5")))


# --- posterior predictive -------------------------------------------------------------------

def _mixture():
    """x -> z in {z0, z1} -> y in {y0, y1}; the likelihood depends on z."""
    v = Vocabulary(("x", "z0", "z1", "y0", "y1"))
    W = 6
    t = {(BOS,): np.eye(W)[0], (0,): np.array([0, .3, .7, 0, 0, 0]), (1,): np.array([0, 0, 0, .8, .2, 0]),
         (2,): np.array([0, 0, 0, .25, .75, 0]), (3,): np.eye(W)[5], (4,): np.eye(W)[5]}
    lm = TabularLM(1, v, 0.0, {k: np.asarray(r, float) for k, r in t.items()})
    pol = DeltaPolicy(lm, PolicyConfig(context_k=1, hidden=4, min_len=1, max_len=1), seed=0)
    return v, lm, pol, [(3,), (4,)]


def test_point_mass_likelihood_gives_unanimous_vote():
    v, lm, pol, answers = _mixture()
    lm.table[(1,)][:] = [0, 0, 0, 1, 0, 0]
    lm.table[(2,)][:] = [0, 0, 0, 1, 0, 0]
    lm._cache.clear()
    pred = posterior_predictive(pol, lm, (0,), 25, np.random.default_rng(0), answers, mode="sample")
    assert pred.answer == (3,) and pred.histogram == {(3,): 25}


def test_single_sample_prediction_is_its_own_vote():
    v, lm, pol, answers = _mixture()
    rng = np.random.default_rng(3)
    pred = posterior_predictive(pol, lm, (0,), 1, rng, answers)
    z = pred.latents[0]
    assert pred.answer == ((3,) if z == (1,) else (4,))


def test_vote_histogram_matches_model_average():
    v, lm, pol, answers = _mixture()
    exact = exact_vote_distribution(exact_policy_terminal(pol, Condition((0,))), lm, (0,), answers, "sample")
    assert exact == pytest.approx([0.3 * 0.8 + 0.7 * 0.25, 0.3 * 0.2 + 0.7 * 0.75])
    n = 10_000
    pred = posterior_predictive(pol, lm, (0,), n, np.random.default_rng(0), answers, mode="sample")
    for a, p in zip(answers, exact):
        assert abs(pred.histogram.get(a, 0) - n * p) < 3 * math.sqrt(n * p * (1 - p))


def test_vote_tie_break():
    answers = [(1,), (0,)]
    assert majority_vote([0, 1], answers, np.array([-1.0, -2.0])) == 0
    assert majority_vote([0, 1], answers, np.array([-1.0, -1.0])) == 1   # lexicographically smaller ids
    with pytest.raises(ValueError):
        posterior_predictive(None, None, (0,), 0, np.random.default_rng(0), answers)


# --- decoding baselines ---------------------------------------------------------------------

def test_beam_one_is_greedy(abc):
    lm = random_lm(abc, 3, order=2)
    rng = np.random.default_rng(0)
    assert decode_baselines(lm, (1,), "beam:1", rng, max_len=5) == decode_baselines(lm, (1,), "greedy", rng,
                                                                                     max_len=5)


def test_beam_two_ranks_terminals():
    v = Vocabulary(("a",))
    lm = TabularLM(1, v, 0.0, {(BOS,): np.array([0.6, 0.4]), (0,): np.array([0.3, 0.7])})
    got = decode_baselines(lm, (), "beam:2", np.random.default_rng(0), max_len=2)
    scores = {s.ids: log_prob_seq(lm, s) if len(s.ids) < 2 else
              lm.continuation_logprob((), s.ids, terminate=False) for s in enumerate_terminals(v, 0, 2)}
    best = sorted(scores, key=lambda k: -scores[k])[:2]
    assert [s.ids for s in got] == best


def test_nucleus_one_matches_ancestral(abc):
    lm = random_lm(abc, 4)
    n = 4000
    a = Counter(s.ids for s in decode_baselines(lm, (), "nucleus:1", np.random.default_rng(1), n=n, max_len=2))
    b = Counter(s.ids for s in decode_baselines(lm, (), "ancestral", np.random.default_rng(2), n=n, max_len=2))
    for k in set(a) | set(b):
        p = (a[k] + b[k]) / (2 * n)
        assert abs(a[k] - b[k]) / n < 3 * math.sqrt(2 * p * (1 - p) / n) + 1e-9


def test_top_k_and_temperature(abc):
    lm = random_lm(abc, 5)
    rng = np.random.default_rng(0)
    top1 = decode_baselines(lm, (), "top_k:1", rng, n=5, max_len=3)
    assert len({s.ids for s in top1}) == 1 and top1[0] == decode_baselines(lm, (), "greedy", rng, max_len=3)[0]
    assert len(decode_baselines(lm, (), "temperature:0.7", rng, n=7, max_len=3)) == 7


@pytest.mark.parametrize("bad", ["top_k:0", "nucleus:1.5", "beam:0", "temperature:0", "sideways"])
def test_invalid_methods(bad):
    with pytest.raises(ValueError):
        parse_method(bad)


# --- metrics --------------------------------------------------------------------------------

def test_continuation_metric_examples(abc):
    lm = random_lm(abc, 6)
    same = [TokenSequence((0, 1))] * 4
    best, div = continuation_metrics(same, lm)
    assert div == {"mean_pairwise_edit": 0.0, "distinct_fraction": 0.25}
    assert best == lm.continuation_logprob((), (0, 1))
    assert normalized_edit_distance((0, 0), (1, 1)) == 1.0
    trio = [(0, 1, 2), (0, 1), (2, 2, 2)]
    # d(012, 01) = 1/3, d(012, 222) = 2/3, d(01, 222) = 3/3
    _, div = continuation_metrics([TokenSequence(s) for s in trio], lm)
    assert div["mean_pairwise_edit"] == pytest.approx((1 / 3 + 2 / 3 + 1) / 3)
    assert edit_distance((), (1, 2)) == 2
    with pytest.raises(ValueError):
        continuation_metrics([], lm)


# --- EM -------------------------------------------------------------------------------------

def test_em_zero_rounds_is_identity():
    task = latent_class_task()
    pol = DeltaPolicy(task.teacher, task.policy_config)
    t, p, m = em_loop(task.teacher, pol, task.extra["data"], 0, EMConfig(rounds=0))
    assert t is task.teacher and p is pol and m == []


def test_exact_em_is_monotone():
    v = Vocabulary(("x", "z0", "z1", "y0", "y1"))
    rng = np.random.default_rng(0)
    lm = TabularLM(1, v, 0.0, {(c,): rng.dirichlet(np.ones(6)) for c in (BOS, 0, 1, 2, 3, 4)})
    data = [((0,), (3,))] * 7 + [((0,), (4,))] * 3
    b = Bounds(1, 1)
    vals = [total_log_marginal(lm, data, b)]
    for _ in range(5):
        lm = exact_m_step(lm, data, b)
        vals.append(total_log_marginal(lm, data, b))
    assert all(b2 >= a - 1e-12 for a, b2 in zip(vals, vals[1:]))
    assert vals[-1] > vals[0]


def test_amortized_round_improves_perturbed_teacher():
    from seqflow.training import TrainConfig
    task = latent_class_task(seed=0)
    pol = DeltaPolicy(task.teacher, task.policy_config, seed=0)
    cfg = EMConfig(rounds=1, train=TrainConfig(steps=150, batch_size=32, grad_accum=1, lr=3e-3, weight_decay=0.0,
                                               conditions_per_step=2, reward_temp_start=1.0, reward_temp_end=1.0))
    _, _, m = em_loop(task.teacher, pol, task.extra["data"], 1, cfg)
    assert m[0]["log_marginal_after"] > m[0]["log_marginal_before"]
