"""Batch composition, replay buffer, schedules, optimizer and training loops."""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .core import Source, TokenSequence, Trajectory, as_ids
from .objective import batch_loss_torch, make_item
from .policy import (
    Condition,
    DeltaPolicy,
    GradientTape,
    NumericError,
    ToolFn,
    as_condition,
    grad,
    recompute_logprobs,
    sample_batch,
)

log = logging.getLogger(__name__)

RewardFamily = Callable[[Condition], object]


# --- schedules ---------------------------------------------------------------------

@dataclass(frozen=True)
class Schedule:
    start: float
    end: float
    horizon: int = 1

    def __post_init__(self) -> None:
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")


def schedule_value(s: Schedule, step: int) -> float:
    if step < 0:
        raise ValueError("step must be >= 0")
    return s.start + (s.end - s.start) * min(step, s.horizon) / s.horizon


# --- replay buffer --------------------------------------------------------------------

@dataclass(frozen=True)
class BufferEntry:
    ids: tuple[int, ...]
    log_reward: float
    forced: tuple[bool, ...]
    order: int


class ReplayBuffer:
    """Per-condition store of the highest-reward distinct sequences seen so far."""

    def __init__(self, capacity: int = 50, sampling: str = "uniform"):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        if sampling not in ("uniform", "reward"):
            raise ValueError("sampling must be 'uniform' or 'reward'")
        self.capacity = capacity
        self.sampling = sampling
        self.entries: dict[tuple, list[BufferEntry]] = {}
        self._counter = 0

    def __len__(self) -> int:
        return sum(len(v) for v in self.entries.values())

    def size(self, key) -> int:
        return len(self.entries.get(_key(key), ()))

    def min_log_reward(self, key) -> float:
        es = self.entries.get(_key(key))
        return min(e.log_reward for e in es) if es else -math.inf

    def items(self, key) -> list[BufferEntry]:
        return list(self.entries.get(_key(key), ()))

    def sample(self, key, rng: np.random.Generator) -> BufferEntry:
        es = self.entries[_key(key)]
        if self.sampling == "uniform" or len(es) == 1:
            return es[int(rng.integers(len(es)))]
        lr = np.array([e.log_reward for e in es])
        p = np.exp(lr - lr.max())
        return es[int(rng.choice(len(es), p=p / p.sum()))]


def _key(key) -> tuple:
    if isinstance(key, Condition):
        return key.key
    if isinstance(key, TokenSequence):
        return (key.ids, None)
    if isinstance(key, tuple) and len(key) == 2 and isinstance(key[0], tuple):
        return key
    return (as_ids(key), None)


def buffer_insert(buf: ReplayBuffer, key, z, log_reward: float,
                  forced: Sequence[bool] | None = None) -> bool:
    """Insert ``z`` unless it is a duplicate or does not beat a full buffer's minimum."""
    if not log_reward > -math.inf:
        return False
    k = _key(key)
    ids = as_ids(z)
    es = buf.entries.setdefault(k, [])
    if any(e.ids == ids for e in es):
        return False
    fl = tuple(bool(f) for f in forced) if forced else (False,) * len(ids)
    entry = BufferEntry(ids, float(log_reward), fl, buf._counter)
    if len(es) < buf.capacity:
        es.append(entry)
        buf._counter += 1
        return True
    worst = min(range(len(es)), key=lambda i: (es[i].log_reward, es[i].order))
    if log_reward <= es[worst].log_reward:
        return False
    es[worst] = entry
    buf._counter += 1
    return True


def seed_buffer(buf: ReplayBuffer, demos: Sequence[tuple], reward_family: RewardFamily,
                condition_of: Callable | None = None,
                forced_of: Callable[[tuple[int, ...]], tuple[bool, ...]] | None = None) -> int:
    """Insert demonstrations ``(x, z)`` or ``(x, z, y)`` with their rewards; returns the count inserted."""
    count = skipped = 0
    for demo in demos:
        if len(demo) == 2:
            x, z = demo
            y = None
        else:
            x, z, y = demo
        cond = condition_of(x, y) if condition_of else Condition(as_ids(x))
        ids = as_ids(z)
        lr = float(reward_family(cond).log_reward(ids))
        if not lr > -math.inf:
            skipped += 1
            continue
        fl = forced_of(ids) if forced_of else None
        count += buffer_insert(buf, cond, ids, lr, fl)
    if skipped:
        log.warning("skipped %d demonstrations with zero reward", skipped)
    return count


# --- configuration ---------------------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 16
    grad_accum: int = 32
    lr: float = 1e-4
    warmup_steps: int = 0
    weight_decay: float = 0.01
    mix_on_policy: float = 0.5
    mix_tempered: float = 0.25
    mix_replay: float = 0.25
    behavior_temp_min: float = 0.5
    behavior_temp_max: float = 2.0
    reward_temp_start: float = 1.1
    reward_temp_end: float = 0.5
    reward_temp_horizon: int = 150
    buffer_capacity: int = 50
    replay_sampling: str = "uniform"
    conditions_per_step: int = 1
    log_reward_floor: float = -100.0
    pg_entropy_coef: float = 0.0
    pg_reward: str = "raw"
    seed: int = 0
    record_wall_time: bool = False

    def __post_init__(self) -> None:
        mix = (self.mix_on_policy, self.mix_tempered, self.mix_replay)
        if any(m < 0 for m in mix) or abs(sum(mix) - 1.0) > 1e-9:
            raise ValueError("mix fractions must be nonnegative and sum to 1")
        if not 0 < self.behavior_temp_min <= self.behavior_temp_max:
            raise ValueError("need 0 < behavior_temp_min <= behavior_temp_max")
        if self.steps < 0 or self.batch_size < 1 or self.grad_accum < 1:
            raise ValueError("invalid steps / batch_size / grad_accum")
        if self.conditions_per_step < 1:
            raise ValueError("conditions_per_step must be >= 1")
        if self.pg_reward not in ("raw", "log"):
            raise ValueError("pg_reward must be 'raw' or 'log'")

    @property
    def mix(self) -> tuple[float, float, float]:
        return (self.mix_on_policy, self.mix_tempered, self.mix_replay)

    @property
    def reward_schedule(self) -> Schedule:
        return Schedule(self.reward_temp_start, self.reward_temp_end, self.reward_temp_horizon)


# --- optimizer ---------------------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, n: int, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, params: np.ndarray, g: np.ndarray, lr: float | None = None) -> np.ndarray:
        lr = self.lr if lr is None else lr
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mhat = self.m / (1 - self.b1 ** self.t)
        vhat = self.v / (1 - self.b2 ** self.t)
        out = params - lr * self.weight_decay * params if self.weight_decay else params.copy()
        return out - lr * mhat / (np.sqrt(vhat) + self.eps)


def warmup_lr(cfg: TrainConfig, step: int) -> float:
    if cfg.warmup_steps <= 0:
        return cfg.lr
    return cfg.lr * min(1.0, (step + 1) / cfg.warmup_steps)


# --- batch composition ----------------------------------------------------------------------

def source_counts(batch_size: int, mix: Sequence[float]) -> tuple[int, ...]:
    """Largest-remainder rounding of ``batch_size * mix`` (ties go to the earlier source)."""
    raw = [batch_size * m for m in mix]
    base = [int(math.floor(r + 1e-12)) for r in raw]
    rest = batch_size - sum(base)
    order = sorted(range(len(mix)), key=lambda i: (-(raw[i] - base[i]), i))
    for i in order[:rest]:
        base[i] += 1
    return tuple(base)


def compose_batch(policy, buf: ReplayBuffer | None, conditions: Sequence, cfg: TrainConfig,
                  step: int, rng: np.random.Generator, tool: ToolFn | None = None
                  ) -> list[tuple[Condition, Trajectory]]:
    """Draw ``cfg.batch_size`` trajectories from the three behavior sources.

    Trajectory ``i`` uses condition ``conditions[i % len(conditions)]``. Replay
    slots fall back to on-policy sampling when the buffer has nothing for the key.
    """
    if not conditions:
        raise ValueError("no conditions supplied")
    conds = [as_condition(c) for c in conditions]
    n_on, n_temp, n_rep = source_counts(cfg.batch_size, cfg.mix)
    slots = [Source.ON_POLICY] * n_on + [Source.TEMPERED] * n_temp + [Source.REPLAY] * n_rep
    out: list = [None] * len(slots)
    to_sample, temps, kinds = [], [], []
    for i, src in enumerate(slots):
        c = conds[i % len(conds)]
        if src is Source.REPLAY and buf is not None and buf.size(c) > 0:
            e = buf.sample(c, rng)
            t = Trajectory(TokenSequence(e.ids, True, vocab=policy.vocab), (0.0,) * len(e.ids),
                           (0.0,) * (len(e.ids) + 1), Source.REPLAY, e.forced)
            out[i] = (c, recompute_logprobs(policy, c, t, Source.REPLAY))
            continue
        if src is Source.TEMPERED:
            temps.append(float(rng.uniform(cfg.behavior_temp_min, cfg.behavior_temp_max)))
            kinds.append(Source.TEMPERED)
        else:
            temps.append(1.0)
            kinds.append(Source.ON_POLICY)
        to_sample.append(i)
    if to_sample:
        trajs = sample_batch(policy, [conds[i % len(conds)] for i in to_sample], temps, rng, tool)
        for i, t, k in zip(to_sample, trajs, kinds):
            out[i] = (conds[i % len(conds)], dataclasses.replace(t, source=k))
    return out


# --- training loops ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    policy: DeltaPolicy
    metrics: list[dict] = field(default_factory=list)
    buffer: ReplayBuffer | None = None


class _RewardCache:
    def __init__(self, family: RewardFamily, limit: int = 1_000_000):
        self.family = family
        self.specs: dict = {}
        self.values: dict = {}
        self.limit = limit

    def spec(self, cond: Condition):
        s = self.specs.get(cond.key)
        if s is None:
            s = self.specs[cond.key] = self.family(cond)
        return s

    def table(self, cond: Condition) -> dict:
        if len(self.values) > self.limit:
            self.values.clear()
        return self.values.setdefault(cond.key, {})


def _record(step, loss, mean_lr, temp, buf, t0, cfg, **extra) -> dict:
    rec = {"step": step, "loss": loss, "mean_log_reward": mean_lr, "reward_temp": temp,
           "buffer_size": len(buf) if buf is not None else 0,
           "wall_ms": round((time.perf_counter() - t0) * 1000.0, 3) if cfg.record_wall_time else 0.0}
    rec.update(extra)
    return rec


def _pick_conditions(conditions, cfg: TrainConfig, rng) -> list[Condition]:
    idx = rng.integers(len(conditions), size=cfg.conditions_per_step)
    return [as_condition(conditions[int(i)]) for i in idx]


def train(policy: DeltaPolicy, reward_family: RewardFamily, conditions: Sequence, cfg: TrainConfig,
          buffer: ReplayBuffer | None = None, tool: ToolFn | None = None,
          on_record: Callable[[dict], None] | None = None) -> TrainResult:
    """Subtrajectory-balance training with tempered rewards R^(1/T(step))."""
    if not conditions:
        raise ValueError("no conditions supplied")
    buf = buffer if buffer is not None else ReplayBuffer(cfg.buffer_capacity, cfg.replay_sampling)
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(policy.n_params, cfg.lr, weight_decay=cfg.weight_decay)
    rewards = _RewardCache(reward_family)
    metrics: list[dict] = []
    sched = cfg.reward_schedule
    for step in range(cfg.steps):
        t0 = time.perf_counter()
        temp = schedule_value(sched, step)
        g_sum = np.zeros(policy.n_params)
        losses, terminal_lrs = [], []
        for _ in range(cfg.grad_accum):
            conds = _pick_conditions(conditions, cfg, rng)
            batch = compose_batch(policy, buf, conds, cfg, step, rng, tool)
            items = []
            for c, traj in batch:
                spec = rewards.spec(c)
                item = make_item(policy, c, traj, spec, log_reward_floor=cfg.log_reward_floor,
                                 cache=rewards.table(c))
                items.append(item)
                final = item.log_rewards[-1]
                terminal_lrs.append(final)
                if traj.source is not Source.REPLAY and not traj.rejected:
                    raw = rewards.table(c).get(traj.sequence.ids, -math.inf)
                    buffer_insert(buf, c, traj.sequence.ids, raw, traj.forced)
            try:
                tape = grad(policy, lambda th: batch_loss_torch(policy, items, th, temp))
            except NumericError as e:
                e.diagnostic.setdefault("step", step)
                raise
            g_sum += tape.gradient
            losses.append(tape.loss)
        with np.errstate(over="ignore", invalid="ignore"):
            params = opt.step(policy.params, g_sum / cfg.grad_accum, warmup_lr(cfg, step))
        if not np.all(np.isfinite(params)):
            raise NumericError("non-finite parameters after the optimizer step",
                               {"step": step, "loss": float(np.mean(losses)), "lr": warmup_lr(cfg, step),
                                "grad_norm": float(np.linalg.norm(g_sum))})
        policy = policy.with_params(params)
        rec = _record(step, float(np.mean(losses)), float(np.mean(terminal_lrs)), temp, buf, t0, cfg)
        metrics.append(rec)
        if on_record:
            on_record(rec)
    return TrainResult(policy, metrics, buf)


# --- reward-maximizing baseline -----------------------------------------------------------------

def _path_logq_and_entropy(policy, batch: Sequence[tuple[Condition, Trajectory]], theta):
    states, owners, picks = [], [], []
    for b, (c, traj) in enumerate(batch):
        ids, fl = traj.sequence.ids, traj.forced
        for i in range(len(ids) + 1):
            if i < len(ids) and fl[i]:
                continue
            if i == len(ids) and traj.rejected:
                continue
            owners.append(b)
            states.append((c, ids[:i], fl[:i]))
            picks.append(ids[i] if i < len(ids) else policy.vocab.size)
    logp, _ = policy.torch_outputs(states, theta)
    chosen = logp[torch.arange(len(states)), torch.tensor(picks)]
    own = torch.tensor(owners)
    logq = torch.zeros(len(batch), dtype=logp.dtype).index_add(0, own, chosen)
    p = torch.exp(logp)
    ent_states = -(torch.where(p > 0, p * logp, torch.zeros((), dtype=logp.dtype))).sum(1)
    ent = torch.zeros(len(batch), dtype=logp.dtype).index_add(0, own, ent_states)
    return logq, ent


def policy_gradient_step(policy, batch: Sequence[tuple[Condition, Trajectory]], rewards: Sequence[float],
                         baseline: float | None = None, entropy_coef: float = 0.0) -> GradientTape:
    """Gradient of -sum (R - b) log q(z) / B, minus an optional per-state entropy bonus."""
    if not batch:
        raise ValueError("empty batch")
    r = np.asarray(rewards, dtype=np.float64)
    b = float(r.mean()) if baseline is None else float(baseline)
    adv = torch.from_numpy(r - b)

    def loss(theta):
        logq, ent = _path_logq_and_entropy(policy, batch, theta)
        out = -(adv * logq).sum() / len(batch)
        if entropy_coef:
            out = out - entropy_coef * ent.mean()
        return out

    return grad(policy, loss)


def train_policy_gradient(policy: DeltaPolicy, reward_family: RewardFamily, conditions: Sequence,
                          cfg: TrainConfig, tool: ToolFn | None = None,
                          on_record: Callable[[dict], None] | None = None) -> TrainResult:
    """Advantage policy gradient on on-policy samples with a batch-mean baseline."""
    if not conditions:
        raise ValueError("no conditions supplied")
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(policy.n_params, cfg.lr, weight_decay=cfg.weight_decay)
    rewards = _RewardCache(reward_family)
    metrics: list[dict] = []
    for step in range(cfg.steps):
        t0 = time.perf_counter()
        g_sum = np.zeros(policy.n_params)
        losses, lrs = [], []
        for _ in range(cfg.grad_accum):
            conds = _pick_conditions(conditions, cfg, rng)
            cs = [conds[i % len(conds)] for i in range(cfg.batch_size)]
            trajs = sample_batch(policy, cs, [1.0] * len(cs), rng, tool)
            batch = list(zip(cs, trajs))
            log_r = []
            for c, t in batch:
                if t.rejected:
                    log_r.append(cfg.log_reward_floor)
                    continue
                lr = float(rewards.spec(c).log_reward(t.sequence.ids))
                log_r.append(max(lr, cfg.log_reward_floor))
            log_r = np.array(log_r)
            vals = np.exp(log_r) if cfg.pg_reward == "raw" else log_r
            tape = policy_gradient_step(policy, batch, vals, None, cfg.pg_entropy_coef)
            g_sum += tape.gradient
            losses.append(tape.loss)
            lrs.extend(log_r.tolist())
        with np.errstate(over="ignore", invalid="ignore"):
            params = opt.step(policy.params, g_sum / cfg.grad_accum, warmup_lr(cfg, step))
        if not np.all(np.isfinite(params)):
            raise NumericError("non-finite parameters after the optimizer step",
                               {"step": step, "loss": float(np.mean(losses)), "lr": warmup_lr(cfg, step),
                                "grad_norm": float(np.linalg.norm(g_sum))})
        policy = policy.with_params(params)
        rec = _record(step, float(np.mean(losses)), float(np.mean(lrs)), 1.0, None, t0, cfg)
        metrics.append(rec)
        if on_record:
            on_record(rec)
    return TrainResult(policy, metrics, None)
