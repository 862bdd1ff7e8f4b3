"""Integer arithmetic with a two-term calculator tool."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ..core import TokenSequence, Vocabulary
from ..policy import ToolRejection, sample_batch

DIGITS = tuple(str(d) for d in range(10))
NEG = "−"  # sign of a negative number, distinct from the binary minus
OPERATORS = ("+", "-")
KEYWORDS = ("Question:", "Answer:", "=", "?", ",", ".", "The", "answer", "is")
VOCAB = Vocabulary(DIGITS + OPERATORS + (NEG,) + KEYWORDS)
COPYABLE = DIGITS + OPERATORS
ANSWER_PREFIX = (".", "The", "answer", "is")


def number_tokens(v: int) -> tuple[str, ...]:
    return ((NEG,) if v < 0 else ()) + tuple(str(abs(int(v))))


@dataclass(frozen=True)
class ArithmeticProblem:
    operands: tuple[int, ...]
    operators: tuple[str, ...]

    def __post_init__(self) -> None:
        if len(self.operators) != len(self.operands) - 1 or len(self.operands) < 2:
            raise ValueError("need at least two operands and one operator between each pair")
        if any(op not in OPERATORS for op in self.operators):
            raise ValueError("operators must be '+' or '-'")

    @property
    def answer_value(self) -> int:
        acc = self.operands[0]
        for op, b in zip(self.operators, self.operands[1:]):
            acc = acc + b if op == "+" else acc - b
        return acc

    @property
    def question_tokens(self) -> tuple[str, ...]:
        out = ["Question:", *number_tokens(self.operands[0])]
        for op, b in zip(self.operators, self.operands[1:]):
            out += [op, *number_tokens(b)]
        return tuple(out + ["=", "?", "Answer:"])

    @property
    def answer_tokens(self) -> tuple[str, ...]:
        return ANSWER_PREFIX + number_tokens(self.answer_value) + (".",)

    @property
    def rationale_tokens(self) -> tuple[str, ...]:
        """Left-fold rationale with calculator results filled in."""
        out: list[str] = []
        acc = self.operands[0]
        for k, (op, b) in enumerate(zip(self.operators, self.operands[1:])):
            if k:
                out.append(",")
            res = acc + b if op == "+" else acc - b
            out += [*number_tokens(acc), op, *number_tokens(b), "=", *number_tokens(res)]
            acc = res
        return tuple(out)

    def render(self) -> str:
        return " ".join(self.question_tokens)


def _parse_number(toks: Sequence[str], i: int) -> tuple[int, int] | None:
    sign = 1
    if i < len(toks) and toks[i] == NEG:
        sign, i = -1, i + 1
    j = i
    while j < len(toks) and toks[j] in DIGITS:
        j += 1
    if j == i:
        return None
    return sign * int("".join(toks[i:j])), j


def calculator_result(tokens: Sequence[str]) -> int:
    """Evaluate the last two terms of the clause ending in '='; raises ToolRejection if malformed."""
    if not tokens or tokens[-1] != "=":
        raise ToolRejection("calculator called without '='")
    start = max((i for i, t in enumerate(tokens[:-1]) if t == ","), default=-1) + 1
    clause = list(tokens[start:-1])
    terms: list[int] = []
    ops: list[str] = []
    i = 0
    while True:
        parsed = _parse_number(clause, i)
        if parsed is None:
            raise ToolRejection("malformed clause")
        v, i = parsed
        terms.append(v)
        if i == len(clause):
            break
        if clause[i] not in OPERATORS:
            raise ToolRejection("malformed clause")
        ops.append(clause[i])
        i += 1
    if len(terms) < 2:
        raise ToolRejection("fewer than two terms")
    a, b = terms[-2], terms[-1]
    return a + b if ops[-1] == "+" else a - b


def calculator_step(seq: TokenSequence | Sequence[str], vocab: Vocabulary = VOCAB) -> TokenSequence:
    """Append the calculator's result to a sequence ending in '='."""
    if isinstance(seq, TokenSequence):
        toks = vocab.decode(seq.ids)
    else:
        toks = tuple(seq)
    res = calculator_result(toks)
    return TokenSequence(vocab.encode(toks + number_tokens(res)), False, vocab=vocab)


def make_tool(vocab: Vocabulary = VOCAB):
    eq = vocab.index("=")

    def tool(ids: tuple[int, ...]):
        if ids[-1] != eq:
            return None
        return vocab.encode(number_tokens(calculator_result(vocab.decode(ids))))

    return tool


def tool_trace(ids: Sequence[int], vocab: Vocabulary = VOCAB) -> tuple[bool, tuple[bool, ...]]:
    """Replay the calculator over ``ids``: (consistent?, forced-token mask)."""
    tool = make_tool(vocab)
    ids = tuple(ids)
    forced = [False] * len(ids)
    i = 0
    while i < len(ids):
        try:
            extra = tool(ids[:i + 1])
        except ToolRejection:
            return False, tuple(forced)
        if extra:
            if ids[i + 1:i + 1 + len(extra)] != tuple(extra):
                return False, tuple(forced)
            for k in range(i + 1, i + 1 + len(extra)):
                forced[k] = True
            i += len(extra)
        i += 1
    return True, tuple(forced)


def tool_consistent(ids: Sequence[int], vocab: Vocabulary = VOCAB) -> bool:
    return tool_trace(ids, vocab)[0]


def sample_with_tool(policy, condition, temperature: float, rng: np.random.Generator):
    return sample_batch(policy, [condition], [temperature], rng, make_tool(policy.vocab))[0]


def parse_answer(tokens: Sequence[str]) -> int | None:
    """Integer value of an answer of the form '. The answer is v .'."""
    toks = list(tokens)
    n = len(ANSWER_PREFIX)
    if tuple(toks[:n]) != ANSWER_PREFIX or not toks or toks[-1] != ".":
        return None
    parsed = _parse_number(toks[n:-1], 0)
    if parsed is None or parsed[1] != len(toks) - n - 1:
        return None
    return parsed[0]


def answer_candidates(lo: int, hi: int, vocab: Vocabulary = VOCAB) -> list[tuple[int, ...]]:
    return [vocab.encode(ANSWER_PREFIX + number_tokens(v) + (".",)) for v in range(lo, hi + 1)]


def value_range(n_operands: int, digit_range: tuple[int, int] = (0, 9)) -> tuple[int, int]:
    lo, hi = digit_range
    return lo - hi * (n_operands - 1), hi * n_operands


def gen_arithmetic_dataset(n_operands: int | Sequence[int], count: int,
                           digit_range: tuple[int, int] = (0, 9),
                           rng: np.random.Generator | int = 0) -> list[ArithmeticProblem]:
    """Uniformly sampled operands and operators; ``n_operands`` may list several sizes."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    sizes = [n_operands] if isinstance(n_operands, int) else list(n_operands)
    if any(n < 2 for n in sizes):
        raise ValueError("n_operands must be >= 2")
    lo, hi = digit_range
    out = []
    for _ in range(count):
        n = sizes[int(rng.integers(len(sizes)))]
        ops = tuple(int(v) for v in rng.integers(lo, hi + 1, size=n))
        signs = tuple(OPERATORS[int(s)] for s in rng.integers(2, size=n - 1))
        out.append(ArithmeticProblem(ops, signs))
    return out


def corrupt_rationale(p: ArithmeticProblem, rng: np.random.Generator,
                      digit_range: tuple[int, int] = (0, 9)) -> tuple[str, ...]:
    """Rationale that copies one operand wrongly (calculator results stay consistent)."""
    k = int(rng.integers(len(p.operands)))
    lo, hi = digit_range
    wrong = int(rng.integers(lo, hi + 1))
    if wrong == p.operands[k]:
        wrong = lo if wrong != lo else hi
    ops = list(p.operands)
    ops[k] = wrong
    return ArithmeticProblem(tuple(ops), p.operators).rationale_tokens


def teacher_corpus(problems: Sequence[ArithmeticProblem], corrupt_fraction: float = 0.0,
                   rng: np.random.Generator | int = 0, vocab: Vocabulary = VOCAB) -> list[TokenSequence]:
    """Question-rationale-answer sequences; a fraction gets corrupted rationales with the true answer."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    out = []
    for p in problems:
        z = p.rationale_tokens
        if corrupt_fraction and rng.random() < corrupt_fraction:
            z = corrupt_rationale(p, rng)
        out.append(TokenSequence(vocab.encode(p.question_tokens + z + p.answer_tokens), True, vocab=vocab))
    return out


# --- dataset files ----------------------------------------------------------------------

def write_dataset(path: str | Path, problems: Sequence[ArithmeticProblem], with_rationale: bool) -> None:
    lines = []
    for p in problems:
        z = " ".join(p.rationale_tokens) if with_rationale else ""
        lines.append(f"{' '.join(p.question_tokens)}\t{z}\t{' '.join(p.answer_tokens)}")
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_dataset(path: str | Path, vocab: Vocabulary = VOCAB) -> list[tuple[tuple[int, ...], tuple[int, ...], tuple[int, ...]]]:
    """Tab-separated (question, rationale-or-empty, answer) token triples."""
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"line {lineno}: expected 3 tab-separated fields")
        out.append(tuple(vocab.encode(f.split()) for f in parts))
    return out


def problem_from_question(question: Sequence[str]) -> ArithmeticProblem:
    toks = list(question)
    if toks[:1] != ["Question:"] or toks[-3:] != ["=", "?", "Answer:"]:
        raise ValueError("not a question")
    body = toks[1:-3]
    operands, ops = [], []
    i = 0
    while True:
        parsed = _parse_number(body, i)
        if parsed is None:
            raise ValueError("malformed question")
        v, i = parsed
        operands.append(v)
        if i == len(body):
            break
        ops.append(body[i])
        i += 1
    return ArithmeticProblem(tuple(operands), tuple(ops))
