"""Desk-scale synthetic tasks: skewed number generation, three-segment infilling,
latent classification and tool-assisted arithmetic."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..base_lm import BOS, TabularLM, fit_ngram
from ..core import TokenSequence, Vocabulary
from ..policy import Condition, PolicyConfig
from . import arithmetic as ar
from .rewards import (
    Constrained,
    Contrastive,
    Infill,
    TargetDensity,
    TemperedContinuation,
    parse_constraint,
)


@dataclass
class TaskSetup:
    name: str
    teacher: TabularLM
    conditions: list[Condition]
    reward_family: Callable[[Condition], object]
    policy_config: PolicyConfig
    tool: Callable | None = None
    eval_conditions: list[Condition] = field(default_factory=list)
    enumerable: bool = True
    extra: dict = field(default_factory=dict)
    prior: TabularLM | None = None    # base model under the policy when it differs from the reward teacher

    @property
    def vocab(self) -> Vocabulary:
        return self.teacher.vocab

    @property
    def policy_teacher(self) -> TabularLM:
        return self.prior if self.prior is not None else self.teacher


# --- random-number generation ---------------------------------------------------------

def rng_vocab(n_tokens: int = 100) -> Vocabulary:
    return Vocabulary(tuple(str(i) for i in range(n_tokens)))


def rng_teacher(n_tokens: int = 100, skew: float = 2.2, corpus_size: int = 1000,
                alpha: float = 0.1) -> TabularLM:
    """Bigram teacher fitted on a Zipf-shaped corpus of single-number sequences."""
    vocab = rng_vocab(n_tokens)
    w = np.arange(1, n_tokens + 1, dtype=float) ** -skew
    counts = np.floor(corpus_size * w / w.sum()).astype(int)
    corpus = [TokenSequence((i,), True) for i in range(n_tokens) for _ in range(counts[i])]
    return fit_ngram(corpus, 1, alpha, vocab)


def rng_task(n_tokens: int = 100, skew: float = 2.2, corpus_size: int = 1000, alpha: float = 0.1,
             hidden: int = 64, context_k: int = 4, teacher: TabularLM | None = None) -> TaskSetup:
    teacher = teacher or rng_teacher(n_tokens, skew, corpus_size, alpha)
    spec = TargetDensity(teacher=teacher, table={(i,): 0.0 for i in range(n_tokens)})
    cfg = PolicyConfig(context_k=context_k, hidden=hidden, min_len=1, max_len=1)
    return TaskSetup("rng", teacher, [Condition()], lambda c: spec, cfg)


# --- three-segment corpus ----------------------------------------------------------------

@dataclass(frozen=True)
class SegmentGrammar:
    """Sentences start token, 1..max_mid middle words (a random bigram chain), end token.

    The end token depends on the last middle word, so an infill must account for it.
    """

    n_start: int = 3
    n_mid: int = 5
    n_end: int = 3
    max_mid: int = 3
    seed: int = 0

    @property
    def vocab(self) -> Vocabulary:
        return Vocabulary(tuple(f"s{i}" for i in range(self.n_start)) +
                          tuple(f"w{i}" for i in range(self.n_mid)) +
                          tuple(f"e{i}" for i in range(self.n_end)))

    def tables(self):
        rng = np.random.default_rng(self.seed)
        first = rng.dirichlet(np.full(self.n_mid, 0.7), size=self.n_start)
        trans = rng.dirichlet(np.full(self.n_mid, 0.7), size=self.n_mid)
        ending = rng.dirichlet(np.full(self.n_end, 0.3), size=self.n_mid)
        return first, trans, ending

    def sample(self, count: int, rng: np.random.Generator) -> list[tuple[tuple[int, ...], ...]]:
        first, trans, ending = self.tables()
        s0, m0, e0 = 0, self.n_start, self.n_start + self.n_mid
        out = []
        for _ in range(count):
            s = int(rng.integers(self.n_start))
            n = int(rng.integers(1, self.max_mid + 1))
            mids = [int(rng.choice(self.n_mid, p=first[s]))]
            while len(mids) < n:
                mids.append(int(rng.choice(self.n_mid, p=trans[mids[-1]])))
            e = int(rng.choice(self.n_end, p=ending[mids[-1]]))
            out.append(((s0 + s,), tuple(m0 + m for m in mids), (e0 + e,)))
        return out


def segment_teacher(grammar: SegmentGrammar, corpus_size: int = 2000, alpha: float = 0.05,
                    order: int = 1, seed: int = 0) -> TabularLM:
    rng = np.random.default_rng(seed)
    corpus = [x + z + y for x, z, y in grammar.sample(corpus_size, rng)]
    return fit_ngram(corpus, order, alpha, grammar.vocab)


def infill_task(grammar: SegmentGrammar | None = None, corpus_size: int = 2000, alpha: float = 0.05,
                hidden: int = 128, context_k: int = 4, seed: int = 0, teacher: TabularLM | None = None) -> TaskSetup:
    g = grammar or SegmentGrammar(seed=seed)
    teacher = teacher or segment_teacher(g, corpus_size, alpha, seed=seed)
    V = g.vocab
    conds = [Condition((V.index(f"s{i}"),), (V.index(f"e{j}"),))
             for i in range(g.n_start) for j in range(g.n_end)]
    cfg = PolicyConfig(context_k=context_k, hidden=hidden, min_len=1, max_len=g.max_mid)

    def family(c: Condition):
        return Infill(teacher=teacher, x=c.x, y=c.y or ())

    return TaskSetup("infill", teacher, conds, family, cfg, extra={"grammar": g})


def continuation_task(kind: str = "continuation", T: float = 0.5, alpha_c: float = 1.0, beta_c: float = -0.5,
                      constraint: str = "must-contain:w0", grammar: SegmentGrammar | None = None,
                      hidden: int = 64, context_k: int = 4, seed: int = 0,
                      teacher: TabularLM | None = None) -> TaskSetup:
    """Prompted continuation tasks on the segment corpus: tempered, contrastive or constrained."""
    g = grammar or SegmentGrammar(seed=seed)
    teacher = teacher or segment_teacher(g, seed=seed)
    V = g.vocab
    conds = [Condition((V.index(f"s{i}"),)) for i in range(g.n_start)]
    cfg = PolicyConfig(context_k=context_k, hidden=hidden, min_len=1, max_len=g.max_mid + 1)
    if kind == "continuation":
        family = lambda c: TemperedContinuation(teacher=teacher, x=c.x, T=T)  # noqa: E731
    elif kind == "contrastive":
        family = lambda c: Contrastive(teacher=teacher, x=c.x, alpha=alpha_c, beta=beta_c)  # noqa: E731
    elif kind == "constrained":
        pred = parse_constraint(constraint, V.tokens)
        family = lambda c: Constrained(teacher=teacher, x=c.x, constraint=pred)  # noqa: E731
    else:
        raise ValueError(f"unknown continuation kind {kind!r}")
    return TaskSetup(kind, teacher, conds, family, cfg, extra={"grammar": g})


# --- latent classification ------------------------------------------------------------------

@dataclass(frozen=True)
class LatentClassGrammar:
    """x -> rationale (1..max_z tokens) -> label; a bigram data-generating model."""

    n_x: int = 4
    n_z: int = 4
    n_y: int = 2
    max_z: int = 2
    seed: int = 0

    @property
    def vocab(self) -> Vocabulary:
        return Vocabulary(tuple(f"x{i}" for i in range(self.n_x)) + tuple(f"r{i}" for i in range(self.n_z)) +
                          tuple(f"y{i}" for i in range(self.n_y)))

    def true_lm(self, noise: float = 0.0, noise_seed: int = 0) -> TabularLM:
        """Exact bigram table of the generating process, optionally mixed with random rows."""
        rng = np.random.default_rng(self.seed)
        V = self.vocab
        W = V.size + 1
        xs = [V.index(f"x{i}") for i in range(self.n_x)]
        zs = [V.index(f"r{i}") for i in range(self.n_z)]
        ys = [V.index(f"y{i}") for i in range(self.n_y)]
        stop = V.stop_id
        table = {}
        row = np.zeros(W)
        row[xs] = 1.0 / self.n_x
        table[(BOS,)] = row
        for x in xs:
            row = np.zeros(W)
            row[zs] = rng.dirichlet(np.full(self.n_z, 0.5))
            table[(x,)] = row
        for z in zs:
            row = np.zeros(W)
            cont = rng.uniform(0.2, 0.5)
            row[zs] = cont * rng.dirichlet(np.full(self.n_z, 0.5))
            row[ys] = (1 - cont) * rng.dirichlet(np.full(self.n_y, 0.4))
            table[(z,)] = row
        for y in ys:
            row = np.zeros(W)
            row[stop] = 1.0
            table[(y,)] = row
        if noise:
            nrng = np.random.default_rng(noise_seed)
            for ctx in table:
                table[ctx] = (1 - noise) * table[ctx] + noise * nrng.dirichlet(np.ones(W))
        for ctx in table:
            table[ctx] = table[ctx] / table[ctx].sum()
        return TabularLM(1, V, 0.0, table)

    def sample(self, count: int, rng: np.random.Generator) -> list[tuple[tuple[int, ...], tuple[int, ...], tuple[int, ...]]]:
        """(x, z, y) triples from the generating model with rationales of length <= max_z."""
        lm = self.true_lm()
        V = self.vocab
        zset = {V.index(f"r{i}") for i in range(self.n_z)}
        out = []
        while len(out) < count:
            seq, hist = [], []
            while True:
                p = lm.dist(hist)
                t = int(rng.choice(len(p), p=p))
                if t == V.stop_id:
                    break
                seq.append(t)
                hist.append(t)
            z = tuple(t for t in seq[1:-1])
            if 1 <= len(z) <= self.max_z and all(t in zset for t in z):
                out.append(((seq[0],), z, (seq[-1],)))
        return out


def latent_class_task(grammar: LatentClassGrammar | None = None, n_data: int = 200, noise: float = 0.5,
                      hidden: int = 64, context_k: int = 4, seed: int = 0,
                      teacher: TabularLM | None = None) -> TaskSetup:
    g = grammar or LatentClassGrammar()
    rng = np.random.default_rng(seed)
    triples = g.sample(n_data, rng)
    data = [(x, y) for x, _, y in triples]
    teacher = teacher or g.true_lm(noise=noise, noise_seed=seed + 1)
    V = g.vocab
    answers = [(V.index(f"y{i}"),) for i in range(g.n_y)]
    cfg = PolicyConfig(context_k=context_k, hidden=hidden, min_len=1, max_len=g.max_z)
    conds = sorted({Condition(x, y) for x, y in data}, key=lambda c: c.key)

    def family(c: Condition):
        return Infill(teacher=teacher, x=c.x, y=c.y or ())

    return TaskSetup("latent-classify", teacher, conds, family, cfg,
                     eval_conditions=sorted({Condition(x) for x, _ in data}, key=lambda c: c.key),
                     extra={"grammar": g, "data": data, "triples": triples, "answers": answers})


# --- arithmetic ------------------------------------------------------------------------------

# Position one-hots are off: rationales for longer questions reach positions never
# seen in training, and the copy rule does not depend on position.
ARITH_POLICY = PolicyConfig(context_k=6, hidden=256, min_len=0, max_len=30, position_features=False,
                            cursor_slots=2, cursor_tokens=ar.COPYABLE)


def arithmetic_task(train_operands: Sequence[int] = (2, 3), ood_operands: Sequence[int] = (4,),
                    n_train: int = 200, n_test: int = 200, n_seed_demos: int = 50,
                    teacher_corpus_size: int = 20000, corrupt_fraction: float = 0.0, teacher_order: int = 8,
                    prior_order: int | None = 3, alpha: float = 0.01, policy_config: PolicyConfig = ARITH_POLICY,
                    seed: int = 0, teacher: TabularLM | None = None) -> TaskSetup:
    """Question -> tool-assisted rationale -> answer, with the teacher fitted on demonstrations.

    The reward teacher's order must reach from each rationale operand back to its
    source in the question (8 tokens for three operands) so that miscopies are
    penalized. The policy sits on a lower-order ``prior`` fitted to the same corpus:
    it knows the format but not the copying, which the adjustment must learn.
    """
    rng = np.random.default_rng(seed)
    V = ar.VOCAB
    all_ops = sorted(set(train_operands) | set(ood_operands))
    corpus_problems = ar.gen_arithmetic_dataset(all_ops, teacher_corpus_size, rng=rng)
    corpus = ar.teacher_corpus(corpus_problems, corrupt_fraction, rng)
    teacher = teacher or fit_ngram(corpus, teacher_order, alpha, V)
    prior = None if prior_order is None else fit_ngram(corpus, prior_order, alpha, V)
    train_problems = ar.gen_arithmetic_dataset(list(train_operands), n_train, rng=rng)
    test_id = ar.gen_arithmetic_dataset(list(train_operands), n_test, rng=rng)
    test_ood = ar.gen_arithmetic_dataset(list(ood_operands), n_test, rng=rng)
    answers_by_x = {V.encode(p.question_tokens): V.encode(p.answer_tokens) for p in train_problems}
    conds = sorted({Condition(x) for x in answers_by_x}, key=lambda c: c.key)
    check = ar.tool_consistent

    def family(c: Condition):
        from .rewards import ArithmeticJoint
        return ArithmeticJoint(teacher=teacher, x=c.x, y=answers_by_x[c.x], check=check)

    lo, hi = ar.value_range(max(all_ops))
    demos = [(V.encode(p.question_tokens), V.encode(p.rationale_tokens), V.encode(p.answer_tokens))
             for p in train_problems[:n_seed_demos]]
    return TaskSetup("arithmetic", teacher, conds, family, policy_config, tool=ar.make_tool(V),
                     enumerable=False,
                     extra={"train": train_problems, "test_id": test_id, "test_ood": test_ood,
                            "answers": ar.answer_candidates(lo, hi), "answer_range": (lo, hi),
                            "demos": demos, "answers_by_x": answers_by_x},
                     prior=prior)
