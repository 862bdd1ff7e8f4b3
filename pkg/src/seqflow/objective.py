"""Subtrajectory-balance loss for sequences that can terminate at every state.

For a trajectory with prefixes s_0..s_n the loss is

    sum_{i<j} (u_i - u_j)^2,   u_i = log F(s_i) - sum_{k<i} log q(z_{k+1} | s_k)

where F(s) = R(s stop) / q(stop | s) at states that may stop. States that cannot
stop (shorter than the minimum length) use the policy's own log-flow estimate,
and an environment-rejected final state has its flow pinned to the reward floor.
Environment-forced tokens are probability-one transitions and are skipped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .core import TokenSequence, Trajectory, as_ids
from .policy import Condition, NumericError, as_condition

_TERMINABLE, _VIRTUAL, _FIXED = 0, 1, 2


@dataclass(frozen=True)
class LossReport:
    total: float
    per_pair: np.ndarray   # (n+1, n+1), entry (i, j) is the squared log-ratio of prefixes i < j
    n_terms: int


@dataclass(frozen=True)
class LossItem:
    """One trajectory prepared for loss evaluation.

    ``points`` are the prefix lengths at which the policy acts; ``log_rewards``
    holds log R(prefix stop) for each point (ignored where the point cannot stop).
    """

    cond: Condition
    ids: tuple[int, ...]
    forced: tuple[bool, ...]
    rejected: bool
    points: tuple[int, ...]
    log_rewards: tuple[float, ...]


def log_reward_of(reward) -> Callable[[tuple[int, ...]], float]:
    if hasattr(reward, "log_reward"):
        return reward.log_reward
    if callable(reward):
        return reward
    raise TypeError("reward must provide log_reward(ids) or be callable")


def decision_points(ids: Sequence[int], forced: Sequence[bool]) -> tuple[int, ...]:
    n = len(ids)
    return tuple(i for i in range(n + 1) if i == n or not forced[i])


def make_item(policy, condition, z, reward, forced: Sequence[bool] | None = None,
              rejected: bool = False, log_reward_floor: float | None = None,
              cache: dict | None = None) -> LossItem:
    """Evaluate prefix rewards for ``z`` and package it for the loss."""
    ids = as_ids(z.sequence if isinstance(z, Trajectory) else z)
    if isinstance(z, Trajectory):
        forced = z.forced
        rejected = z.rejected
    fl = tuple(bool(f) for f in forced) if forced else (False,) * len(ids)
    pts = decision_points(ids, fl)
    fn = log_reward_of(reward)
    lrs = []
    for d in pts:
        if rejected and d == len(ids):
            if log_reward_floor is None:
                raise ValueError("rejected trajectory requires a log-reward floor")
            lrs.append(float(log_reward_floor))
            continue
        if d < policy.min_len:
            lrs.append(float("nan"))
            continue
        key = ids[:d]
        if cache is not None and key in cache:
            lr = cache[key]
        else:
            lr = float(fn(key))
            if cache is not None:
                cache[key] = lr
        if not lr > -math.inf or math.isnan(lr):
            if log_reward_floor is None:
                raise ValueError(f"non-positive reward at prefix length {d}")
            lr = float(log_reward_floor)
        elif log_reward_floor is not None:
            lr = max(lr, float(log_reward_floor))
        lrs.append(lr)
    return LossItem(as_condition(condition), ids, fl, rejected, pts, tuple(lrs))


def _tempered(item: LossItem, temperature: float) -> LossItem:
    if temperature == 1.0:
        return item
    return LossItem(item.cond, item.ids, item.forced, item.rejected, item.points,
                    tuple(v / temperature for v in item.log_rewards))


def pair_terms(policy, items: Sequence[LossItem], theta: torch.Tensor | None = None):
    """Per-item squared-difference matrices over decision points, as one padded tensor.

    Returns ``(sq, valid)``: ``sq[b, i, j]`` is the (i, j) term of item ``b`` for
    i < j and zero elsewhere.
    """
    B = len(items)
    M = max(len(it.points) for it in items)
    states, rows = [], np.zeros((B, M), dtype=np.int64)
    toks = np.zeros((B, M), dtype=np.int64)
    kinds = np.full((B, M), _FIXED, dtype=np.int64)
    vals = np.zeros((B, M))
    valid = np.zeros((B, M), dtype=bool)
    has_next = np.zeros((B, M), dtype=bool)
    stop = policy.vocab.size
    for b, it in enumerate(items):
        m = len(it.points)
        for a, d in enumerate(it.points):
            rows[b, a] = len(states)
            states.append((it.cond, it.ids[:d], it.forced[:d]))
            valid[b, a] = True
            if a < m - 1:
                toks[b, a] = it.ids[d]
                has_next[b, a] = True
            else:
                toks[b, a] = stop
            if it.rejected and a == m - 1:
                kinds[b, a], vals[b, a] = _FIXED, it.log_rewards[a]
            elif d < policy.min_len:
                kinds[b, a] = _VIRTUAL
            else:
                kinds[b, a], vals[b, a] = _TERMINABLE, it.log_rewards[a]
    logp, vflow = policy.torch_outputs(states, theta)
    r = torch.from_numpy(rows)
    lp_tok = logp[r, torch.from_numpy(toks)]
    lp_stop = logp[r, stop]
    vf = vflow[r]
    kinds_t = torch.from_numpy(kinds)
    valid_t = torch.from_numpy(valid)
    zero = torch.zeros((), dtype=logp.dtype)
    step = torch.where(torch.from_numpy(has_next), lp_tok, zero)
    cum = torch.cumsum(step, dim=1) - step
    term = kinds_t == _TERMINABLE
    vals_t = torch.from_numpy(vals)
    log_f = torch.where(term, vals_t - torch.where(term, lp_stop, zero),
                        torch.where(kinds_t == _VIRTUAL, vf, vals_t))
    u = torch.where(valid_t, log_f - cum, zero)
    with torch.no_grad():
        bad = valid_t & ~torch.isfinite(u)
    if bool(bad.any()):
        b = int(bad.nonzero()[0, 0])
        raise NumericError("non-finite log-flow on a realized path",
                           {"ids": list(items[b].ids), "forced": list(items[b].forced),
                            "log_rewards": list(items[b].log_rewards)})
    diff = u[:, :, None] - u[:, None, :]
    tri = torch.triu(torch.ones(M, M, dtype=torch.bool), diagonal=1)
    mask = tri[None] & valid_t[:, :, None] & valid_t[:, None, :]
    sq = torch.where(mask, diff * diff, zero)
    return sq, mask


def batch_loss_torch(policy, items: Sequence[LossItem], theta: torch.Tensor | None = None,
                     temperature: float = 1.0) -> torch.Tensor:
    """Mean loss over items (rewards tempered by ``temperature``), differentiable in ``theta``."""
    if not items:
        raise ValueError("empty batch")
    sq, _ = pair_terms(policy, [_tempered(it, temperature) for it in items], theta)
    return sq.sum(dim=(1, 2)).mean()


def item_totals(policy, items: Sequence[LossItem]) -> np.ndarray:
    with torch.no_grad():
        sq, _ = pair_terms(policy, items)
    return sq.sum(dim=(1, 2)).numpy()


def _report(policy, item: LossItem) -> LossReport:
    with torch.no_grad():
        sq, mask = pair_terms(policy, [item])
    sq = sq[0].numpy()
    n = len(item.ids)
    full = np.zeros((n + 1, n + 1))
    pts = list(item.points)
    full[np.ix_(pts, pts)] = sq
    return LossReport(float(sq.sum()), full, int(mask[0].sum()))


def subtb_loss(policy, condition, z: TokenSequence | Trajectory, reward,
               forced: Sequence[bool] | None = None, rejected: bool = False,
               log_reward_floor: float | None = None) -> LossReport:
    if isinstance(z, TokenSequence) and len(z.ids) > policy.max_len and not (forced and any(forced)):
        raise ValueError("sequence longer than max_len")
    item = make_item(policy, condition, z, reward, forced, rejected, log_reward_floor)
    return _report(policy, item)


def tb_loss(policy, condition, z, reward, **kw) -> float:
    """The whole-trajectory term (first prefix against last) of the subtrajectory loss."""
    rep = subtb_loss(policy, condition, z, reward, **kw)
    n = rep.per_pair.shape[0] - 1
    return float(rep.per_pair[0, n]) if n > 0 else 0.0


def batch_loss(policy, batch: Sequence[tuple]) -> float:
    """Arithmetic mean of subtrajectory-balance totals over (condition, z, reward) triples."""
    if not batch:
        raise ValueError("empty batch")
    items = [make_item(policy, c, z, r) for c, z, r in batch]
    return float(np.mean(item_totals(policy, items)))
