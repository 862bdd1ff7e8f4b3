"""Trainable sampler: teacher log-probabilities plus a learned logit adjustment."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .base_lm import TabularLM
from .core import Source, TokenSequence, Trajectory, as_ids

FORMAT_VERSION = 1
NEG_INF = float("-inf")


class NumericError(RuntimeError):
    """A loss or gradient evaluated to a non-finite value."""

    def __init__(self, message: str, diagnostic: dict | None = None):
        super().__init__(message)
        self.diagnostic = diagnostic or {}


class ChecksumError(ValueError):
    pass


@dataclass(frozen=True)
class Condition:
    """Conditioning context: a prompt ``x`` and, for infilling, an optional suffix ``y``."""

    x: tuple[int, ...] = ()
    y: tuple[int, ...] | None = None

    @property
    def key(self) -> tuple:
        return (self.x, self.y)


def as_condition(c: Condition | TokenSequence | Sequence[int] | None) -> Condition:
    if isinstance(c, Condition):
        return c
    return Condition(as_ids(c))


@dataclass(frozen=True)
class PolicyConfig:
    context_k: int = 4
    hidden: int = 64
    min_len: int = 0
    max_len: int = 20
    position_features: bool = True
    # number of upcoming prompt tokens exposed through the copy cursor (0 disables it)
    cursor_slots: int = 0
    cursor_tokens: tuple[str, ...] = ()
    init_scale: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "cursor_tokens", tuple(self.cursor_tokens))
        if self.context_k < 1 or self.hidden < 1:
            raise ValueError("context_k and hidden must be >= 1")
        if not 0 <= self.min_len <= self.max_len:
            raise ValueError("need 0 <= min_len <= max_len")
        if self.cursor_slots < 0:
            raise ValueError("cursor_slots must be >= 0")


State = tuple  # (Condition, prefix ids, forced flags)


@dataclass
class StateBatch:
    idx: torch.Tensor          # (S, A) active feature indices
    teacher: torch.Tensor      # (S, V+1) teacher log-probabilities
    lengths: torch.Tensor      # (S,)

    def __len__(self) -> int:
        return int(self.lengths.shape[0])


@dataclass(frozen=True)
class GradientTape:
    loss: float
    gradient: np.ndarray


class DeltaPolicy:
    """q(. | s) = softmax(teacher log-probs + MLP(one-hot context features)), length-masked.

    The output layer starts at zero, so a fresh policy reproduces the teacher
    exactly. Prefixes shorter than ``min_len`` cannot stop; at ``max_len`` only the
    stop event is allowed. At states that cannot stop, the unmasked stop logit
    relative to the token logits serves as the log-flow estimate of the state.
    """

    def __init__(self, teacher: TabularLM, config: PolicyConfig | None = None,
                 params: np.ndarray | None = None, seed: int = 0):
        self.teacher = teacher
        self.config = config or PolicyConfig()
        cfg = self.config
        V = teacher.vocab.size
        self.V = V
        self.n_out = V + 1
        self._slot_width = V + 2  # tokens, BOS, separator
        self._pos_offset = cfg.context_k * self._slot_width
        n_pos = cfg.max_len + 1 if cfg.position_features else 0
        self._cur_offset = self._pos_offset + n_pos
        self.n_features = self._cur_offset + cfg.cursor_slots * (V + 1)
        self.n_active = cfg.context_k + (1 if cfg.position_features else 0) + cfg.cursor_slots
        self._copyable = frozenset(teacher.vocab.index(t) for t in cfg.cursor_tokens)
        F, H, O = self.n_features, cfg.hidden, self.n_out
        self._shapes = [(F, H), (H,), (H, O), (O,)]
        self.n_params = F * H + H + H * O + O
        if params is None:
            rng = np.random.default_rng(seed)
            params = np.zeros(self.n_params)
            params[:F * H] = rng.normal(0.0, cfg.init_scale / np.sqrt(self.n_active), F * H)
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {params.shape}")
        self.params = params
        self._feat_cache: dict = {}

    # -- construction helpers ---------------------------------------------------
    @property
    def vocab(self):
        return self.teacher.vocab

    @property
    def min_len(self) -> int:
        return self.config.min_len

    @property
    def max_len(self) -> int:
        return self.config.max_len

    def with_params(self, params: np.ndarray) -> "DeltaPolicy":
        new = DeltaPolicy.__new__(DeltaPolicy)
        new.__dict__.update(self.__dict__)
        new.params = np.array(params, dtype=np.float64)
        return new

    def with_teacher(self, teacher: TabularLM) -> "DeltaPolicy":
        if teacher.vocab != self.teacher.vocab:
            raise ValueError("teacher vocabulary differs")
        new = self.with_params(self.params)
        new.teacher = teacher
        return new

    # -- encoding -----------------------------------------------------------------
    def _cursor(self, x: tuple[int, ...], prefix: tuple[int, ...], forced: tuple[bool, ...]) -> int:
        cop = self._copyable

        def skip(p: int) -> int:
            while p < len(x) and x[p] not in cop:
                p += 1
            return p

        p = skip(0)
        for t, f in zip(prefix, forced):
            if not f and p < len(x) and x[p] == t:
                p = skip(p + 1)
        return p

    def features(self, cond: Condition, prefix: tuple[int, ...],
                 forced: tuple[bool, ...] | None = None) -> tuple[int, ...]:
        key = (cond, prefix, forced)
        hit = self._feat_cache.get(key)
        if hit is not None:
            return hit
        cfg = self.config
        V = self.V
        seq = list(cond.x)
        if cond.y is not None:
            seq.append(V + 1)
            seq.extend(cond.y)
        seq.extend(prefix)
        k = cfg.context_k
        window = ([V] * k + seq)[-k:]
        feats = [slot * self._slot_width + s for slot, s in enumerate(window)]
        if cfg.position_features:
            feats.append(self._pos_offset + min(len(prefix), cfg.max_len))
        if cfg.cursor_slots:
            fl = forced if forced is not None else (False,) * len(prefix)
            p = self._cursor(cond.x, prefix, fl)
            for j in range(cfg.cursor_slots):
                sym = cond.x[p + j] if p + j < len(cond.x) else V
                feats.append(self._cur_offset + j * (V + 1) + sym)
        out = tuple(feats)
        if len(self._feat_cache) > 500_000:
            self._feat_cache.clear()
        self._feat_cache[key] = out
        return out

    def batch(self, states: Sequence[State]) -> StateBatch:
        idx = np.empty((len(states), self.n_active), dtype=np.int64)
        teach = np.empty((len(states), self.n_out))
        lens = np.empty(len(states), dtype=np.int64)
        for r, (cond, prefix, forced) in enumerate(states):
            idx[r] = self.features(cond, prefix, forced)
            teach[r] = self.teacher.logprobs(cond.x + prefix)
            lens[r] = len(prefix)
        return StateBatch(torch.from_numpy(idx), torch.from_numpy(teach), torch.from_numpy(lens))

    # -- forward --------------------------------------------------------------------
    def _unpack(self, theta: torch.Tensor) -> list[torch.Tensor]:
        out, off = [], 0
        for shape in self._shapes:
            n = int(np.prod(shape))
            out.append(theta[off:off + n].view(*shape))
            off += n
        return out

    def forward(self, batch: StateBatch, theta: torch.Tensor | None = None):
        """Masked log-probabilities (S, V+1) and state log-flow estimates (S,)."""
        if theta is None:
            theta = torch.from_numpy(self.params)
        W1, b1, W2, b2 = self._unpack(theta)
        S, A = batch.idx.shape
        pre = W1.index_select(0, batch.idx.reshape(-1)).view(S, A, -1).sum(1) + b1
        delta = torch.tanh(pre) @ W2 + b2
        raw = batch.teacher + delta
        V = self.V
        tok_raw, stop_raw = raw[:, :V], raw[:, V]
        vflow = stop_raw - torch.logsumexp(tok_raw, dim=1)
        neg = torch.tensor(NEG_INF, dtype=raw.dtype)
        at_max = batch.lengths >= self.max_len
        stop = torch.where(batch.lengths < self.min_len, neg, stop_raw)
        stop = torch.where(at_max, torch.zeros_like(stop), stop)   # forced even if the teacher gives stop no mass
        toks = torch.where(at_max[:, None], neg, tok_raw)
        logp = torch.log_softmax(torch.cat([toks, stop[:, None]], dim=1), dim=1)
        return logp, vflow

    def torch_outputs(self, states: Sequence[State], theta: torch.Tensor | None = None):
        return self.forward(self.batch(states), theta)

    def evaluate(self, states: Sequence[State]) -> tuple[np.ndarray, np.ndarray]:
        with torch.no_grad():
            logp, vflow = self.torch_outputs(states)
        return logp.numpy(), vflow.numpy()


class TablePolicy:
    """Policy given by explicit per-prefix conditionals (used for exact posteriors).

    ``table`` maps a prefix tuple to ``(logp over V+1, log_flow)``; prefixes not in
    the table get a uniform distribution and log-flow ``-inf``.
    """

    def __init__(self, vocab, table: dict, min_len: int, max_len: int):
        self._vocab = vocab
        self.table = table
        self.min_len = min_len
        self.max_len = max_len
        self.n_out = vocab.size + 1

    @property
    def vocab(self):
        return self._vocab

    def torch_outputs(self, states: Sequence[State], theta=None):
        rows, flows = [], []
        for _, prefix, _ in states:
            hit = self.table.get(tuple(prefix))
            if hit is None:
                rows.append(np.full(self.n_out, -np.log(self.n_out)))
                flows.append(NEG_INF)
            else:
                rows.append(hit[0])
                flows.append(hit[1])
        return torch.tensor(np.array(rows)), torch.tensor(np.array(flows))

    def evaluate(self, states):
        logp, vflow = self.torch_outputs(states)
        return logp.numpy(), vflow.numpy()


# --- public operations ----------------------------------------------------------------

def policy_logprobs(policy, condition, prefix: TokenSequence | Sequence[int],
                    forced: Sequence[bool] | None = None) -> np.ndarray:
    ids = as_ids(prefix)
    if isinstance(prefix, TokenSequence) and prefix.terminated:
        raise ValueError("prefix must be unterminated")
    if len(ids) > policy.max_len:
        raise ValueError("prefix longer than max_len")
    fl = tuple(forced) if forced is not None else None
    logp, _ = policy.evaluate([(as_condition(condition), ids, fl)])
    return logp[0]


ToolFn = Callable[[tuple[int, ...]], "tuple[int, ...] | None"]


class ToolRejection(Exception):
    """Raised by a tool callback when the environment rejects the current prefix."""


def _draw(logp: np.ndarray, temperature: float, u: float) -> int:
    if temperature == 0.0:
        return int(np.argmax(logp))
    z = logp / temperature
    z = z - z.max()
    p = np.exp(z)
    c = np.cumsum(p)
    return int(min(np.searchsorted(c, u * c[-1], side="right"), len(p) - 1))


def sample_batch(policy, conditions: Sequence, temperatures: Sequence[float],
                 rng: np.random.Generator, tool: ToolFn | None = None,
                 source: Source = Source.ON_POLICY) -> list[Trajectory]:
    """Sample one trajectory per condition with per-item behavior temperatures.

    Tokens are drawn from softmax(log q / T) with T = 0 meaning argmax; the
    recorded log-probabilities are always those of the untempered policy.
    ``tool`` is called after every policy-chosen token with the current ids and
    returns environment tokens to append (or None); it may raise ToolRejection.
    """
    conds = [as_condition(c) for c in conditions]
    temps = [float(t) for t in temperatures]
    if len(temps) != len(conds):
        raise ValueError("one temperature per condition required")
    if any(t < 0 for t in temps):
        raise ValueError("temperature must be >= 0")
    stop = policy.vocab.size
    n = len(conds)
    ids: list[list[int]] = [[] for _ in range(n)]
    forced: list[list[bool]] = [[] for _ in range(n)]
    steps: list[list[float]] = [[] for _ in range(n)]
    stops: list[list[float]] = [[] for _ in range(n)]
    rejected = [False] * n
    active = list(range(n))
    while active:
        need = [i for i in active if len(ids[i]) < policy.max_len]
        done_now = []
        for i in active:
            if len(ids[i]) >= policy.max_len:
                stops[i].append(0.0)
                done_now.append(i)
        if need:
            states = [(conds[i], tuple(ids[i]), tuple(forced[i])) for i in need]
            logp, _ = policy.evaluate(states)
            us = rng.random(len(need))
            for r, i in enumerate(need):
                row = logp[r]
                stops[i].append(float(row[stop]))
                tok = _draw(row, temps[i], float(us[r]))
                if tok == stop:
                    done_now.append(i)
                    continue
                ids[i].append(tok)
                forced[i].append(False)
                steps[i].append(float(row[tok]))
                if tool is not None:
                    try:
                        extra = tool(tuple(ids[i]))
                    except ToolRejection:
                        stops[i].append(NEG_INF)
                        rejected[i] = True
                        done_now.append(i)
                        continue
                    for t in extra or ():
                        stops[i].append(NEG_INF)
                        ids[i].append(int(t))
                        forced[i].append(True)
                        steps[i].append(0.0)
        done = set(done_now)
        active = [i for i in active if i not in done]
    vocab = policy.vocab
    return [Trajectory(TokenSequence(tuple(ids[i]), True, vocab=vocab), tuple(steps[i]),
                       tuple(stops[i]), source, tuple(forced[i]), rejected[i], temps[i])
            for i in range(n)]


def sample_sequence(policy, condition, temperature: float, seed: int | np.random.Generator,
                    tool: ToolFn | None = None) -> Trajectory:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return sample_batch(policy, [condition], [temperature], rng, tool)[0]


def path_states(cond: Condition, ids: tuple[int, ...], forced: tuple[bool, ...] | None = None):
    forced = tuple(forced) if forced else (False,) * len(ids)
    return [(cond, ids[:i], forced[:i]) for i in range(len(ids) + 1)], forced


def terminal_log_prob(policy, condition, z: TokenSequence | Sequence[int],
                      forced: Sequence[bool] | None = None) -> float:
    """log q of emitting ``z`` then stopping; environment-forced tokens count as probability one."""
    ids = as_ids(z)
    if len(ids) > policy.max_len and not (forced and any(forced)):
        return NEG_INF
    cond = as_condition(condition)
    states, fl = path_states(cond, ids, forced)
    logp, _ = policy.evaluate(states)
    total = 0.0
    for i, t in enumerate(ids):
        if not fl[i]:
            total += float(logp[i, t])
    return total + float(logp[len(ids), policy.vocab.size])


def recompute_logprobs(policy, condition, traj: Trajectory, source: Source | None = None) -> Trajectory:
    """Re-score a stored trajectory under ``policy`` (used for replayed sequences)."""
    cond = as_condition(condition)
    ids = traj.sequence.ids
    states, fl = path_states(cond, ids, traj.forced)
    logp, _ = policy.evaluate(states)
    stop = policy.vocab.size
    steps = tuple(0.0 if fl[i] else float(logp[i, t]) for i, t in enumerate(ids))
    stops = []
    for i in range(len(ids) + 1):
        if i < len(ids) and fl[i]:
            stops.append(NEG_INF)
        elif i == len(ids) and traj.rejected:
            stops.append(NEG_INF)
        else:
            stops.append(float(logp[i, stop]))
    return Trajectory(traj.sequence, steps, tuple(stops), source or traj.source, fl, traj.rejected)


def grad(policy: DeltaPolicy, loss_fn: Callable[[torch.Tensor], torch.Tensor]) -> GradientTape:
    """Reverse-mode gradient of ``loss_fn(theta)`` at the policy's parameters."""
    theta = torch.tensor(policy.params, dtype=torch.float64, requires_grad=True)
    loss = loss_fn(theta)
    if not torch.is_tensor(loss):
        loss = torch.tensor(float(loss), dtype=torch.float64)
    value = float(loss.detach())
    if not np.isfinite(value):
        raise NumericError(f"non-finite loss {value}")
    if loss.requires_grad:
        (g,) = torch.autograd.grad(loss, theta, allow_unused=True)
        g = np.zeros(policy.n_params) if g is None else g.numpy().copy()
    else:
        g = np.zeros(policy.n_params)
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite gradient")
    return GradientTape(value, g)


# --- checkpoints ---------------------------------------------------------------------

def to_text(policy: DeltaPolicy) -> str:
    doc = {
        "format": "seqflow-delta-policy",
        "version": FORMAT_VERSION,
        "config": asdict(policy.config),
        "teacher_sha256": policy.teacher.checksum(),
        "params": [float(p).hex() for p in policy.params],
    }
    return json.dumps(doc, indent=0, sort_keys=True) + "\n"


def from_text(text: str, teacher: TabularLM) -> DeltaPolicy:
    doc = json.loads(text)
    if doc.get("format") != "seqflow-delta-policy" or doc.get("version") != FORMAT_VERSION:
        raise ValueError("unsupported policy checkpoint")
    if doc["teacher_sha256"] != teacher.checksum():
        raise ChecksumError("policy checkpoint was trained against a different teacher")
    cfg = doc["config"]
    cfg["cursor_tokens"] = tuple(cfg.get("cursor_tokens", ()))
    params = np.array([float.fromhex(p) for p in doc["params"]])
    return DeltaPolicy(teacher, PolicyConfig(**cfg), params=params)


def save_policy(policy: DeltaPolicy, path: str | Path) -> str:
    text = to_text(policy)
    Path(path).write_text(text)
    return hashlib.sha256(text.encode()).hexdigest()


def load_policy(path: str | Path, teacher: TabularLM) -> DeltaPolicy:
    return from_text(Path(path).read_text(), teacher)
