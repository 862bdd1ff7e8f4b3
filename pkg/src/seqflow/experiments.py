"""Task construction, training runs and evaluation reports shared by the CLI and the acceptance suite."""

from __future__ import annotations

import dataclasses
import math
import time
from typing import Callable, Sequence

import numpy as np

from .base_lm import TabularLM, fit_ngram, log_prob_seq
from .config import ConfigError, RunConfig
from .core import TokenSequence, Vocabulary
from .oracle import (
    Bounds,
    entropy,
    enumerate_terminals,
    exact_policy_terminal,
    exact_target,
    kl,
    marginal_likelihood,
    tv,
)
from .policy import Condition, DeltaPolicy, PolicyConfig, sample_batch
from .tasks import arithmetic as ar
from .tasks.decoding import decode_baselines, parse_method
from .tasks.em import EMConfig, em_loop
from .tasks.metrics import continuation_metrics
from .tasks.predictive import posterior_predictive
from .tasks.rewards import TargetDensity
from .tasks.synthetic import (
    ARITH_POLICY,
    TaskSetup,
    arithmetic_task,
    continuation_task,
    infill_task,
    latent_class_task,
    rng_task,
)
from .training import (
    ReplayBuffer,
    TrainConfig,
    TrainResult,
    seed_buffer,
    train,
    train_policy_gradient,
)

_FLAT = dict(grad_accum=1, weight_decay=0.0, reward_temp_start=1.0, reward_temp_end=1.0)

# Desk-scale settings used by the acceptance suite; anything not listed keeps the RunConfig default.
PRESETS: dict[str, dict] = {
    "rng": dict(steps=5000, batch_size=64, lr=3e-3, **_FLAT),
    "infill": dict(steps=2000, batch_size=64, lr=3e-3, **_FLAT),
    "continuation": dict(steps=2000, batch_size=64, lr=3e-3, **_FLAT),
    "contrastive": dict(steps=2000, batch_size=64, lr=3e-3, **_FLAT),
    "constrained": dict(steps=2000, batch_size=64, lr=3e-3, **_FLAT),
    "latent-classify": dict(steps=500, batch_size=32, lr=3e-3, conditions_per_step=2, em_rounds=1, **_FLAT),
    "arithmetic": dict(steps=2500, batch_size=16, grad_accum=1, lr=1e-3, weight_decay=0.0, conditions_per_step=2,
                       replay_sampling="reward", pg_reward="log"),
}


def preset(task: str, **overrides) -> RunConfig:
    if task not in PRESETS:
        raise ConfigError(f"no preset for task {task!r}")
    return RunConfig(task=task, **{**PRESETS[task], **overrides})


def seed_streams(seed: int) -> dict[str, int]:
    """Independent integer seeds for policy init, training and evaluation, all derived from one root."""
    a, b, c = np.random.SeedSequence(seed).generate_state(3)
    return {"init": int(a), "train": int(b), "eval": int(c)}


# --- construction ---------------------------------------------------------------------------

def build_task(cfg: RunConfig, teacher: TabularLM | None = None) -> TaskSetup:
    kw = {}
    if cfg.policy_hidden is not None:
        kw["hidden"] = cfg.policy_hidden
    if cfg.policy_context_k is not None:
        kw["context_k"] = cfg.policy_context_k
    t = cfg.task
    if t == "rng":
        return rng_task(teacher=teacher, **kw)
    if t == "infill":
        return infill_task(teacher=teacher, **kw)
    if t in ("continuation", "contrastive", "constrained"):
        return continuation_task(t, T=cfg.continuation_temperature, alpha_c=cfg.contrastive_alpha,
                                 beta_c=cfg.contrastive_beta, constraint=cfg.constraint, teacher=teacher, **kw)
    if t == "latent-classify":
        return latent_class_task(teacher=teacher, **kw)
    if t == "arithmetic":
        pc = dataclasses.replace(ARITH_POLICY, **kw)
        return arithmetic_task(n_train=cfg.n_train, n_seed_demos=cfg.seed_rationales,
                               corrupt_fraction=cfg.corrupt_fraction, policy_config=pc, teacher=teacher)
    raise ConfigError(f"unknown task {t!r}")


def make_policy(task: TaskSetup, cfg: RunConfig) -> DeltaPolicy:
    return DeltaPolicy(task.policy_teacher, task.policy_config, seed=seed_streams(cfg.seed)["init"])


def train_config(cfg: RunConfig) -> TrainConfig:
    return dataclasses.replace(cfg.train_config(), seed=seed_streams(cfg.seed)["train"])


def arithmetic_buffer(task: TaskSetup, cfg: RunConfig, demos: Sequence[tuple] | None = None) -> ReplayBuffer:
    buf = ReplayBuffer(cfg.buffer_capacity, cfg.replay_sampling)
    pool = task.extra["demos"] if demos is None else list(demos)
    if cfg.seed_rationales > 0:
        seed_buffer(buf, pool[:cfg.seed_rationales], task.reward_family,
                    forced_of=lambda z: ar.tool_trace(z, task.vocab)[1])
    return buf


def run_training(task: TaskSetup, cfg: RunConfig, policy: DeltaPolicy | None = None, method: str = "gfn",
                 demos: Sequence[tuple] | None = None,
                 on_record: Callable[[dict], None] | None = None) -> TrainResult:
    """One training run: subtrajectory balance (``gfn``) or the reward-maximizing baseline (``pg``)."""
    policy = policy or make_policy(task, cfg)
    tc = train_config(cfg)
    if method == "pg":
        return train_policy_gradient(policy, task.reward_family, task.conditions, tc, tool=task.tool,
                                     on_record=on_record)
    if method != "gfn":
        raise ConfigError(f"unknown training method {method!r}")
    buf = arithmetic_buffer(task, cfg, demos) if task.name == "arithmetic" else None
    return train(policy, task.reward_family, task.conditions, tc, buffer=buf, tool=task.tool, on_record=on_record)


def run_em(task: TaskSetup, cfg: RunConfig, policy: DeltaPolicy | None = None):
    """EM on the latent-classification task; returns (teacher, policy, per-round metrics)."""
    if task.name != "latent-classify":
        raise ConfigError("EM runs only on the latent-classify task")
    policy = policy or make_policy(task, cfg)
    em = EMConfig(rounds=cfg.em_rounds, mode=cfg.em_mode, train=train_config(cfg), seed=seed_streams(cfg.seed)["eval"])
    bounds = Bounds(task.policy_config.min_len, task.policy_config.max_len)
    return em_loop(task.teacher, policy, task.extra["data"], cfg.em_rounds, em, bounds)


# --- evaluation -----------------------------------------------------------------------------

def bounds_of(task: TaskSetup) -> Bounds:
    return Bounds(task.policy_config.min_len, task.policy_config.max_len)


def target_distribution(task: TaskSetup, condition: Condition):
    return exact_target(task.reward_family(condition), bounds_of(task), task.vocab)


def _kl_or_inf(p, q) -> float:
    try:
        return kl(p, q)
    except ValueError:  # p puts mass outside the support of q
        return math.inf


def distribution_report(task: TaskSetup, policy, conditions: Sequence[Condition] | None = None) -> dict:
    """KL(q || target), TV and entropies per condition against the enumerated target."""
    rows = []
    for c in conditions or task.conditions:
        tgt = target_distribution(task, c)
        q = exact_policy_terminal(policy, c, bounds_of(task))
        rows.append({"condition": [list(c.x), None if c.y is None else list(c.y)],
                     "kl": _kl_or_inf(q, tgt), "tv": tv(q, tgt), "entropy": entropy(q), "target_entropy": entropy(tgt)})
    return {"kl_mean": float(np.mean([r["kl"] for r in rows])), "tv_mean": float(np.mean([r["tv"] for r in rows])),
            "tv_max": float(max(r["tv"] for r in rows)), "entropy_mean": float(np.mean([r["entropy"] for r in rows])),
            "target_entropy_mean": float(np.mean([r["target_entropy"] for r in rows])), "per_condition": rows}


def valid_fraction(task: TaskSetup, policy, n: int, rng: np.random.Generator) -> float:
    """Share of sampled terminals that carry positive target reward (valid outputs)."""
    ok = 0
    for c in task.conditions:
        spec = task.reward_family(c)
        trajs = sample_batch(policy, [c] * n, [1.0] * n, rng, task.tool)
        ok += sum(spec.log_reward(t.sequence.ids) > -math.inf for t in trajs)
    return ok / (n * len(task.conditions))


def arithmetic_accuracy(task: TaskSetup, policy, problems: Sequence[ar.ArithmeticProblem], cfg: RunConfig,
                        rng: np.random.Generator) -> dict:
    """Majority-vote accuracy overall and per operand count."""
    V = task.vocab
    answers = task.extra["answers"]
    hits: dict[int, list[bool]] = {}
    for p in problems:
        x = V.encode(p.question_tokens)
        pred = posterior_predictive(policy, task.teacher, x, cfg.eval_samples, rng, answers, mode=cfg.answer_mode,
                                    temperature=cfg.eval_temperature, tool=task.tool)
        hits.setdefault(len(p.operands), []).append(ar.parse_answer(V.decode(pred.answer)) == p.answer_value)
    flat = [h for v in hits.values() for h in v]
    return {"accuracy": float(np.mean(flat)) if flat else float("nan"),
            "by_operands": {str(k): float(np.mean(v)) for k, v in sorted(hits.items())}}


def continuation_report(task: TaskSetup, samples_by_cond: dict) -> dict:
    rows = []
    for c, seqs in samples_by_cond.items():
        best, div = continuation_metrics(seqs, task.teacher, c.x)
        rows.append({"condition": list(c.x), "max_loglik": best, **div})
    return {"max_loglik_mean": float(np.mean([r["max_loglik"] for r in rows])),
            "mean_pairwise_edit": float(np.mean([r["mean_pairwise_edit"] for r in rows])),
            "distinct_fraction": float(np.mean([r["distinct_fraction"] for r in rows])), "per_condition_samples": rows}


def evaluate(task: TaskSetup, policy, cfg: RunConfig, n_samples: int = 1000) -> dict:
    """Task-specific report for a trained (or baseline) policy."""
    rng = np.random.default_rng(seed_streams(cfg.seed)["eval"])
    if task.name == "arithmetic":
        return {"in_distribution": arithmetic_accuracy(task, policy, task.extra["test_id"], cfg, rng),
                "out_of_distribution": arithmetic_accuracy(task, policy, task.extra["test_ood"], cfg, rng)}
    out = distribution_report(task, policy)
    out["valid_fraction"] = valid_fraction(task, policy, n_samples, rng)
    if task.name in ("continuation", "contrastive", "constrained"):
        samples = {c: [t.sequence for t in sample_batch(policy, [c] * min(n_samples, 64), [1.0] * min(n_samples, 64),
                                                        rng)] for c in task.conditions}
        out.update(continuation_report(task, samples))
    if task.name == "latent-classify":
        b = bounds_of(task)
        out["log_marginal"] = float(sum(marginal_likelihood(task.teacher, x, y, b) for x, y in task.extra["data"]))
    return out


def decoding_report(task: TaskSetup, method: str, cfg: RunConfig, n_samples: int = 64) -> dict:
    """Decoding baselines from the teacher, reported in the same shape as ``evaluate``."""
    if task.name == "arithmetic":
        raise ConfigError("decoding baselines are defined for the prompted continuation and enumerable tasks")
    m = parse_method(method)
    rng = np.random.default_rng(seed_streams(cfg.seed)["eval"])
    pc = task.policy_config
    n = 1 if m.name == "greedy" else n_samples   # deterministic: one hypothesis, like beam width 1
    samples = {c: decode_baselines(task.teacher, c.x, m, rng, n=n, min_len=pc.min_len, max_len=pc.max_len)
               for c in task.conditions}
    out = continuation_report(task, samples)
    valid = [task.reward_family(c).log_reward(s.ids) > -math.inf for c, ss in samples.items() for s in ss]
    out["valid_fraction"] = float(np.mean(valid))
    return out


# --- acceptance experiments -------------------------------------------------------------------

def random_table_run(instance: int, steps: int = 4000, batch_size: int = 64, lr: float = 3e-3,
                     hidden: int = 256) -> dict:
    """Train against a random log-normal reward table over |V| = 5, lengths 1..4 (780 terminals)."""
    vocab = Vocabulary(tuple("abcde"))
    teacher = fit_ngram([], 1, 1.0, vocab)
    b = Bounds(1, 4)
    rng = np.random.default_rng(instance)
    terms = list(enumerate_terminals(vocab, b.min_len, b.max_len))
    table = {t.ids: float(v) for t, v in zip(terms, rng.normal(0.0, 1.0, len(terms)))}
    spec = TargetDensity(teacher=teacher, table=table)
    target = exact_target(spec, b, vocab)
    pol = DeltaPolicy(teacher, PolicyConfig(context_k=4, hidden=hidden, min_len=1, max_len=4), seed=instance)
    tc = TrainConfig(steps=steps, batch_size=batch_size, lr=lr, seed=instance, **_FLAT)
    t0 = time.perf_counter()
    res = train(pol, lambda c: spec, [Condition()], tc)
    seconds = time.perf_counter() - t0
    return {"n_terminals": len(terms), "tv": tv(exact_policy_terminal(res.policy, Condition(), b), target),
            "tv_init": tv(exact_policy_terminal(pol, Condition(), b), target), "seconds": seconds}


def rng_pair(seed: int, cfg: RunConfig | None = None) -> dict:
    """Paired GFlowNet / policy-gradient runs on the random-number task."""
    cfg = (cfg or preset("rng")).replace(seed=seed)
    task = build_task(cfg)
    out = {}
    for method in ("gfn", "pg"):
        t0 = time.perf_counter()
        res = run_training(task, cfg, method=method)
        rep = distribution_report(task, res.policy)
        out[method] = {"kl": rep["kl_mean"], "entropy": rep["entropy_mean"], "target_entropy": rep["target_entropy_mean"],
                       "seconds": time.perf_counter() - t0, "policy": res.policy}
    out["task"] = task
    return out


def arithmetic_comparison(cfg: RunConfig | None = None) -> dict:
    """GFlowNet with seeded demos, GFlowNet without seeds, and the policy-gradient baseline."""
    cfg = cfg or preset("arithmetic")
    task = build_task(cfg)
    runs = {"gfn": (cfg, "gfn"), "gfn_no_seed": (cfg.replace(seed_rationales=0), "gfn"), "pg": (cfg, "pg")}
    out = {}
    for name, (c, method) in runs.items():
        t0 = time.perf_counter()
        res = run_training(task, c, method=method)
        rep = evaluate(task, res.policy, c)
        out[name] = {"id": rep["in_distribution"]["accuracy"], "ood": rep["out_of_distribution"]["accuracy"],
                     "seconds": time.perf_counter() - t0}
    return out


def mean_log_reward(task: TaskSetup, policy, condition: Condition, n: int, rng: np.random.Generator) -> float:
    spec = task.reward_family(condition)
    trajs = sample_batch(policy, [condition] * n, [1.0] * n, rng, task.tool)
    return float(np.mean([spec.log_reward(t.sequence.ids) for t in trajs]))


def infill_comparison(cfg: RunConfig | None = None, n: int = 1000) -> dict:
    """Infill-trained policy against prefix-only sampling from the teacher: TV to the exact
    posterior and the mean log p(X Z Y) of each sampler's latents."""
    cfg = cfg or preset("infill")
    task = build_task(cfg)
    t0 = time.perf_counter()
    res = run_training(task, cfg)
    seconds = time.perf_counter() - t0
    prior = DeltaPolicy(task.teacher, task.policy_config, seed=seed_streams(cfg.seed)["init"])
    rng = np.random.default_rng(seed_streams(cfg.seed)["eval"])

    def mean_joint(policy, cond: Condition, sample_cond: Condition) -> float:
        trajs = sample_batch(policy, [sample_cond] * n, [1.0] * n, rng)
        return float(np.mean([log_prob_seq(task.teacher, TokenSequence(cond.x + t.sequence.ids + cond.y, True))
                              for t in trajs]))

    joint_policy = [mean_joint(res.policy, c, c) for c in task.conditions]
    joint_prior = [mean_joint(prior, c, Condition(c.x)) for c in task.conditions]
    rep = distribution_report(task, res.policy)
    return {"tv_mean": rep["tv_mean"], "tv_max": rep["tv_max"], "joint_policy": float(np.mean(joint_policy)),
            "joint_prior": float(np.mean(joint_prior)),
            "margin": float(np.mean(joint_policy) - np.mean(joint_prior)), "seconds": seconds}
