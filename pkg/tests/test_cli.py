import json
import math

import numpy as np
import pytest

from seqflow import experiments as ex
from seqflow.base_lm import load_lm, log_prob_seq
from seqflow.cli import main
from seqflow.config import RunConfig, parse_text
from seqflow.core import TokenSequence
from seqflow.oracle import enumerate_terminals, exact_posterior_policy
from seqflow.tasks import arithmetic as ar


def run(*argv):
    return main([str(a) for a in argv])


def lines(path):
    return [json.loads(s) for s in path.read_text().splitlines()]


# --- fit-teacher ----------------------------------------------------------------------------

def test_fit_teacher_two_line_corpus(tmp_path):
    (tmp_path / "c.txt").write_text("a b\na c\n")
    assert run("fit-teacher", "--corpus", tmp_path / "c.txt", "--order", 1, "--alpha", 0,
               "--out", tmp_path / "t1.json") == 0
    lm = load_lm(tmp_path / "t1.json")
    v = lm.vocab
    a, b, c = v.index("a"), v.index("b"), v.index("c")
    p = np.exp(lm.logprobs((a,)))
    assert p[b] == pytest.approx(0.5) and p[c] == pytest.approx(0.5)
    assert np.exp(lm.logprobs((b,)))[v.stop_id] == pytest.approx(1.0)
    run("fit-teacher", "--corpus", tmp_path / "c.txt", "--order", 1, "--alpha", 0, "--out", tmp_path / "t2.json")
    assert (tmp_path / "t1.json").read_bytes() == (tmp_path / "t2.json").read_bytes()


def test_fit_teacher_validation_and_errors(tmp_path, capsys):
    (tmp_path / "c.txt").write_text("a b\na c\n")
    (tmp_path / "v.txt").write_text("a b\n")
    assert run("fit-teacher", "--corpus", tmp_path / "c.txt", "--alpha", 0, "--validation", tmp_path / "v.txt",
               "--out", tmp_path / "t.json") == 0
    assert f"held-out log-likelihood {math.log(0.5):.6f}" in capsys.readouterr().out
    (tmp_path / "empty.txt").write_text("")
    assert run("fit-teacher", "--corpus", tmp_path / "empty.txt", "--alpha", 0, "--out", tmp_path / "e.json") == 2
    (tmp_path / "v2.txt").write_text("a b\na zz\n")
    assert run("fit-teacher", "--corpus", tmp_path / "c.txt", "--validation", tmp_path / "v2.txt",
               "--out", tmp_path / "t.json") == 2
    assert "line 2" in capsys.readouterr().err
    assert run("fit-teacher", "--corpus", tmp_path / "missing.txt", "--out", tmp_path / "t.json") == 2


# --- train ----------------------------------------------------------------------------------

def test_zero_steps_keeps_teacher_skew(tmp_path):
    out = tmp_path / "r"
    assert run("train", "--preset", "rng", "--set", "steps=0", "--out", out) == 0
    teacher = load_lm(out / "teacher.json")
    p = np.exp(teacher.logprobs(()))[:teacher.vocab.size]
    p /= p.sum()
    skew = float(np.sum(p * np.log(p * len(p))))
    summary = json.loads((out / "summary.json").read_text())
    assert summary["report"]["kl_mean"] == pytest.approx(skew, rel=1e-9)
    assert skew > 1.0
    assert (out / "metrics.jsonl").read_text() == ""


def test_rng_training_matches_uniform(tmp_path):
    out = tmp_path / "r"
    assert run("train", "--preset", "rng", "--out", out) == 0
    report = json.loads((out / "summary.json").read_text())["report"]
    assert report["kl_mean"] < 1e-2
    assert report["valid_fraction"] == 1.0
    recs = lines(out / "metrics.jsonl")
    assert len(recs) == 5000 and set(recs[0]) == {"step", "loss", "mean_log_reward", "reward_temp", "buffer_size",
                                                  "wall_ms"}


def test_arithmetic_seeding_fills_buffer(tmp_path):
    out = tmp_path / "a"
    assert run("train", "--preset", "arithmetic", "--set", "steps=1", "--set", "eval_samples=1", "--out", out) == 0
    assert lines(out / "metrics.jsonl")[0]["buffer_size"] >= 50
    assert (out / "prior.json").exists()


def test_config_and_numeric_errors(tmp_path, capsys):
    assert run("train", "--preset", "infill", "--set", "stpes=3", "--out", tmp_path / "x") == 2
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("steps = many\n")
    assert run("train", "--config", cfg, "--out", tmp_path / "x") == 2
    capsys.readouterr()
    out = tmp_path / "nan"
    assert run("train", "--preset", "infill", "--set", "steps=3", "--set", "lr=1e308", "--set", "batch_size=8",
               "--out", out) == 3
    diag = json.loads(capsys.readouterr().err.splitlines()[-1])
    assert diag["step"] == 0
    assert json.loads((out / "manifest.json").read_text())["config"]["lr"] == 1e308   # written before training


def test_runs_are_reproducible(tmp_path):
    for name in ("a", "b"):
        assert run("train", "--preset", "infill", "--set", "steps=15", "--set", "seed=4", "--out", tmp_path / name) == 0
    for f in ("metrics.jsonl", "policy.json", "summary.json", "manifest.json", "teacher.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    m = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert m["seed"] == 4 and set(m["seed_streams"]) == {"init", "train", "eval"}
    assert m["code_version"] and m["outputs"]["metrics"] == "metrics.jsonl"
    assert run("train", "--preset", "infill", "--set", "steps=15", "--set", "seed=5", "--out", tmp_path / "c") == 0
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() != (tmp_path / "c" / "metrics.jsonl").read_bytes()


def test_manifest_records_input_checksums(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("task = infill\nsteps = 2\n")
    assert run("train", "--config", cfg, "--out", tmp_path / "o") == 0
    m = json.loads((tmp_path / "o" / "manifest.json").read_text())
    import hashlib
    assert m["inputs"]["config"] == hashlib.sha256(cfg.read_bytes()).hexdigest()


# --- eval -----------------------------------------------------------------------------------

def test_eval_echoes_config_and_checks_teacher(tmp_path):
    out = tmp_path / "r"
    assert run("train", "--preset", "infill", "--set", "steps=5", "--out", out) == 0
    assert run("eval", "--preset", "infill", "--policy", out / "policy.json", "--n-samples", 50,
               "--out", tmp_path / "e.json") == 0
    doc = json.loads((tmp_path / "e.json").read_text())
    assert doc["config"]["task"] == "infill" and "tv_mean" in doc["report"]
    assert run("eval", "--preset", "rng", "--policy", out / "policy.json") == 2


def test_exact_posterior_policy_reports_zero_tv():
    cfg = ex.preset("infill")
    task = ex.build_task(cfg)
    b = ex.bounds_of(task)
    pol = exact_posterior_policy(task.reward_family(task.conditions[0]), b, task.vocab)
    report = ex.distribution_report(task, pol, task.conditions[:1])
    assert report["tv_mean"] < 1e-9


class MemorizingPolicy:
    """Replays the stored rationale for each training question, letting the tool fill in results."""

    def __init__(self, problems, max_len):
        V = ar.VOCAB
        self.vocab, self.min_len, self.max_len = V, 0, max_len
        self.script = {}
        for p in problems:
            ids = V.encode(p.rationale_tokens)
            forced = ar.tool_trace(ids, V)[1]
            self.script[V.encode(p.question_tokens)] = [t for t, f in zip(ids, forced) if not f]

    def evaluate(self, states):
        rows = []
        for cond, _, forced in states:
            script = self.script[cond.x]
            chosen = sum(1 for f in (forced or ()) if not f)
            row = np.full(self.vocab.size + 1, -np.inf)
            row[script[chosen] if chosen < len(script) else self.vocab.stop_id] = 0.0
            rows.append(row)
        return np.array(rows), np.zeros(len(states))


def test_memorizing_policy_scores_full_accuracy_on_train_split():
    cfg = ex.preset("arithmetic")
    task = ex.build_task(cfg)
    probs = task.extra["train"][:40]
    pol = MemorizingPolicy(probs, task.policy_config.max_len)
    acc = ex.arithmetic_accuracy(task, pol, probs, cfg, np.random.default_rng(0))
    assert acc["accuracy"] == 1.0


# --- oracle ---------------------------------------------------------------------------------

def test_oracle_uniform_hundred(tmp_path):
    assert run("oracle", "--preset", "rng", "--out", tmp_path / "o.txt") == 0
    rows = (tmp_path / "o.txt").read_text().splitlines()
    assert len(rows) == 100
    assert all(float(r.split("\t")[-1]) == pytest.approx(0.01, abs=1e-15) for r in rows)


def test_oracle_infill_matches_direct_posterior(tmp_path):
    assert run("oracle", "--preset", "infill", "--condition", 1, "--out", tmp_path / "o.txt") == 0
    task = ex.build_task(ex.preset("infill"))
    c = task.conditions[1]
    b = ex.bounds_of(task)
    joint = {z.ids: math.exp(log_prob_seq(task.teacher, TokenSequence(c.x + z.ids + c.y, True)))
             for z in enumerate_terminals(task.vocab, b.min_len, b.max_len)}
    total = sum(joint.values())
    got = {}
    for row in (tmp_path / "o.txt").read_text().splitlines():
        seq, p = row.rsplit("\t", 1)
        got[task.vocab.encode(tuple(t for t in seq.split() if t != "<STOP>"))] = float(p)
    for z, p in joint.items():
        assert abs(got.get(z, 0.0) - p / total) < 1e-12


def test_oracle_cap_and_range(tmp_path):
    assert run("oracle", "--preset", "rng", "--cap", 10) == 4
    assert run("oracle", "--preset", "rng", "--condition", 5) == 2
    assert run("oracle", "--preset", "arithmetic") == 2


# --- ablate ---------------------------------------------------------------------------------

def test_ablate_unknown_key(tmp_path):
    assert run("ablate", "--preset", "infill", "--sweep", "nope=1,2", "--out", tmp_path / "ab") == 2
    assert run("ablate", "--preset", "infill", "--sweep", "steps=1,x", "--out", tmp_path / "ab") == 2


def test_ablate_seed_rationales_table(tmp_path):
    out = tmp_path / "ab"
    assert run("ablate", "--preset", "arithmetic", "--set", "steps=40", "--set", "eval_samples=1",
               "--sweep", "seed_rationales=0,10,50", "--out", out) == 0
    doc = json.loads((out / "table.json").read_text())
    assert [r["seed_rationales"] for r in doc["rows"]] == ["0", "10", "50"]
    assert all(r["metric_name"] == "accuracy_id" for r in doc["rows"])
    assert isinstance(doc["monotone"], bool)
    assert len((out / "table.tsv").read_text().splitlines()) == 4


def test_single_value_sweep_equals_train(tmp_path):
    common = ["--preset", "infill", "--set", "steps=6"]
    assert run("ablate", *common, "--sweep", "seed=2", "--out", tmp_path / "ab") == 0
    assert run("train", *common, "--set", "seed=2", "--out", tmp_path / "tr") == 0
    for f in ("metrics.jsonl", "policy.json", "summary.json"):
        assert (tmp_path / "ab" / "seed=2" / f).read_bytes() == (tmp_path / "tr" / f).read_bytes()


# --- baseline -------------------------------------------------------------------------------

def test_beam_one_report_equals_greedy(tmp_path):
    for m in ("greedy", "beam:1"):
        assert run("baseline", "--preset", "continuation", "--method", m, "--out", tmp_path / m) == 0
    g, b = (json.loads((tmp_path / m / "summary.json").read_text())["report"] for m in ("greedy", "beam:1"))
    assert g == b


def test_baseline_report_schema_matches_eval(tmp_path):
    assert run("baseline", "--preset", "infill", "--set", "steps=3", "--method", "policy_gradient",
               "--out", tmp_path / "pg") == 0
    assert run("train", "--preset", "infill", "--set", "steps=3", "--out", tmp_path / "gfn") == 0
    pg, gfn = (json.loads((tmp_path / d / "summary.json").read_text()) for d in ("pg", "gfn"))
    assert set(pg["report"]) == set(gfn["report"]) and pg["method"] == "pg"
    assert run("baseline", "--preset", "infill", "--method", "sideways", "--out", tmp_path / "z") == 2
    assert run("baseline", "--preset", "infill", "--method", "top_k:0", "--out", tmp_path / "z") == 2


# --- config ---------------------------------------------------------------------------------

def test_dump_defaults(capsys):
    assert run("config", "--dump-defaults") == 0
    assert parse_text(capsys.readouterr().out) == RunConfig()
    assert run("config", "--dump-defaults", "--preset", "rng") == 0
    assert parse_text(capsys.readouterr().out) == ex.preset("rng")
