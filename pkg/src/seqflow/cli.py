"""Command-line runner: fit-teacher, train, eval, oracle, ablate, baseline and config.

Exit codes: 0 success, 2 config or input error, 3 non-finite numerics, 4 enumeration cap exceeded.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import experiments as ex
from .base_lm import (
    CorpusError,
    fit_ngram,
    held_out_log_likelihood,
    load_lm,
    read_corpus,
    save_lm,
)
from .config import (
    ConfigError,
    RunConfig,
    as_dict,
    load_config,
    parse_assignments,
    to_text,
)
from .core import VocabularyError
from .oracle import DEFAULT_CAP, Bounds, EnumerationCapError, dump_lines, exact_target
from .policy import ChecksumError, NumericError, load_policy, save_policy
from .tasks import arithmetic as ar

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_CAP = 0, 2, 3, 4
BASELINES = ("policy_gradient", "greedy", "top_k", "nucleus", "beam", "temperature", "ancestral")


def code_version() -> str:
    """Package version plus a digest of the package sources."""
    h = hashlib.sha256()
    root = Path(__file__).resolve().parent
    for p in sorted(root.rglob("*.py")):
        h.update(p.relative_to(root).as_posix().encode())
        h.update(p.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, default=_jsonable)


def _jsonable(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, (tuple, set)):
        return list(o)
    if dataclasses.is_dataclass(o):
        return dataclasses.asdict(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2, default=_jsonable) + "\n")


def resolve_config(args) -> RunConfig:
    base = None
    if getattr(args, "preset", None):
        base = ex.preset(args.preset)
    cfg = load_config(args.config, base) if getattr(args, "config", None) else (base or RunConfig())
    pairs = list(getattr(args, "set", None) or [])
    if getattr(args, "task", None):
        pairs.append(f"task={args.task}")
    return parse_assignments(pairs, cfg)


def _inputs(args) -> dict[str, str]:
    out = {}
    for key in ("config", "teacher", "demos", "policy"):
        p = getattr(args, key, None)
        if p:
            out[key] = file_sha256(p)
    return out


def _load_teacher(args):
    return load_lm(args.teacher) if getattr(args, "teacher", None) else None


def _demos(args):
    return ar.read_dataset(args.demos) if getattr(args, "demos", None) else None


def write_manifest(out: Path, cfg: RunConfig, args, outputs: dict[str, str]) -> dict:
    manifest = {"config": as_dict(cfg), "seed": cfg.seed, "seed_streams": ex.seed_streams(cfg.seed),
                "code_version": code_version(), "inputs": _inputs(args), "outputs": outputs,
                "command": args.command}
    write_json(out / "manifest.json", manifest)
    return manifest


# --- subcommands ---------------------------------------------------------------------------

def cmd_fit_teacher(args) -> int:
    corpus, vocab = read_corpus(args.corpus)
    lm = fit_ngram(corpus, args.order, args.alpha, vocab)
    digest = save_lm(lm, args.out)
    print(f"wrote {args.out} sha256={digest}")
    if args.validation:
        held, _ = read_corpus(args.validation, vocab)
        print(f"held-out log-likelihood {held_out_log_likelihood(lm, held):.6f}")
    return EXIT_OK


def train_into(out: Path, cfg: RunConfig, args, method: str = "gfn") -> dict:
    """Train one run into ``out``; returns the summary record."""
    out.mkdir(parents=True, exist_ok=True)
    outputs = {"metrics": "metrics.jsonl", "policy": "policy.json", "teacher": "teacher.json",
               "summary": "summary.json"}
    task = ex.build_task(cfg, _load_teacher(args))
    if task.prior is not None:
        outputs["prior"] = "prior.json"
    write_manifest(out, cfg, args, outputs)
    save_lm(task.teacher, out / "teacher.json")
    if task.prior is not None:
        save_lm(task.prior, out / "prior.json")
    summary: dict = {"config": as_dict(cfg), "method": method}
    with open(out / "metrics.jsonl", "w") as fh:
        def on_record(rec: dict) -> None:
            fh.write(_dump(rec) + "\n")

        if task.name == "latent-classify" and cfg.em_rounds > 0 and method == "gfn":
            teacher, policy, rounds = ex.run_em(task, cfg)
            for r in rounds:
                on_record(r)
            task = ex.build_task(cfg, teacher)
            save_lm(teacher, out / "teacher.json")
            summary["em_rounds"] = rounds
        else:
            res = ex.run_training(task, cfg, method=method, demos=_demos(args), on_record=on_record)
            policy = res.policy
            if res.metrics:
                summary["final_loss"] = res.metrics[-1]["loss"]
                summary["final_mean_log_reward"] = res.metrics[-1]["mean_log_reward"]
                summary["final_buffer_size"] = res.metrics[-1].get("buffer_size")
    save_policy(policy, out / "policy.json")
    summary["report"] = ex.evaluate(task, policy, cfg)
    write_json(out / "summary.json", summary)
    return summary


def _headline(report: dict) -> str:
    if "in_distribution" in report:
        return (f"accuracy id={report['in_distribution']['accuracy']:.3f} "
                f"ood={report['out_of_distribution']['accuracy']:.3f}")
    parts = [f"{k}={report[k]:.6g}" for k in ("kl_mean", "tv_mean", "valid_fraction", "max_loglik_mean",
                                               "log_marginal") if k in report]
    return " ".join(parts)


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    summary = train_into(Path(args.out), cfg, args)
    print(f"task={cfg.task} {_headline(summary['report'])}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    task = ex.build_task(cfg, _load_teacher(args))
    policy = load_policy(args.policy, task.policy_teacher)
    report = ex.evaluate(task, policy, cfg, n_samples=args.n_samples)
    doc = {"config": as_dict(cfg), "policy_sha256": file_sha256(args.policy), "report": report}
    if args.out:
        write_json(Path(args.out), doc)
    print(f"task={cfg.task} {_headline(report)}")
    return EXIT_OK


def cmd_oracle(args) -> int:
    cfg = resolve_config(args)
    task = ex.build_task(cfg, _load_teacher(args))
    if not task.enumerable:
        raise ConfigError(f"task {task.name!r} has no enumerable target")
    if not 0 <= args.condition < len(task.conditions):
        raise ConfigError(f"condition index out of range (0..{len(task.conditions) - 1})")
    pc = task.policy_config
    b = Bounds(pc.min_len if args.min_len is None else args.min_len,
               pc.max_len if args.max_len is None else args.max_len)
    dist = exact_target(task.reward_family(task.conditions[args.condition]), b, task.vocab, cap=args.cap)
    text = dump_lines(dist, task.vocab)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _parse_sweep(text: str, cfg: RunConfig) -> tuple[str, list[str]]:
    key, sep, values = text.partition("=")
    key = key.strip()
    if not sep or not values.strip():
        raise ConfigError("sweep must look like key=v1,v2,...")
    if key not in as_dict(cfg):
        raise ConfigError(f"unknown config key {key!r}")
    return key, [v.strip() for v in values.split(",")]


def _primary_metric(report: dict) -> tuple[str, float, bool]:
    """(name, value, higher_is_better) for the trend check."""
    if "in_distribution" in report:
        return "accuracy_id", report["in_distribution"]["accuracy"], True
    if "log_marginal" in report:
        return "log_marginal", report["log_marginal"], True
    return "kl_mean", report["kl_mean"], False


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    key, values = _parse_sweep(args.sweep, cfg)
    runs = [(v, parse_assignments([(key, v)], cfg)) for v in values]   # validate every value up front
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, failed = [], False
    for value, run_cfg in runs:
        row = {key: value}
        try:
            s = train_into(out / f"{key}={value}", run_cfg, args, method=args.method)
            name, metric, higher = _primary_metric(s["report"])
            row.update(metric_name=name, metric=metric, final_loss=s.get("final_loss"))
        except (NumericError, EnumerationCapError, ValueError) as e:
            row.update(error=f"{type(e).__name__}: {e}")
            failed = True
        rows.append(row)
        _write_table(out, key, rows)
    vals = [r["metric"] for r in rows if "metric" in r]
    trend = None
    if len(vals) == len(rows) and vals:
        higher = _primary_metric(s["report"])[2]
        trend = all((b >= a) if higher else (b <= a) for a, b in zip(vals, vals[1:]))
    doc = {"key": key, "rows": rows, "monotone": trend, "config": as_dict(cfg)}
    write_json(out / "table.json", doc)
    for r in rows:
        print("\t".join(f"{k}={v}" for k, v in r.items()))
    print(f"monotone trend: {trend}")
    return EXIT_NUMERIC if failed else EXIT_OK


def _write_table(out: Path, key: str, rows: list[dict]) -> None:
    cols = [key, "metric_name", "metric", "final_loss", "error"]
    lines = ["\t".join(cols)] + ["\t".join("" if r.get(c) is None else str(r.get(c)) for c in cols) for r in rows]
    (out / "table.tsv").write_text("\n".join(lines) + "\n")


def cmd_baseline(args) -> int:
    cfg = resolve_config(args)
    name = args.method.partition(":")[0]
    if name not in BASELINES:
        raise ConfigError(f"unknown baseline {args.method!r}; expected one of {', '.join(BASELINES)}")
    out = Path(args.out)
    if name == "policy_gradient":
        summary = train_into(out, cfg, args, method="pg")
        report = summary["report"]
    else:
        out.mkdir(parents=True, exist_ok=True)
        task = ex.build_task(cfg, _load_teacher(args))
        report = ex.decoding_report(task, args.method, cfg, n_samples=args.n_samples)
        write_json(out / "summary.json", {"config": as_dict(cfg), "method": args.method, "report": report})
    print(f"task={cfg.task} method={args.method} {_headline(report)}")
    return EXIT_OK


def cmd_config(args) -> int:
    cfg = ex.preset(args.preset) if args.preset else RunConfig()
    sys.stdout.write(to_text(cfg))
    return EXIT_OK


# --- entry point ---------------------------------------------------------------------------

def _run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--preset", choices=sorted(ex.PRESETS), help="start from a task preset")
    p.add_argument("--task", help="task name (overrides the config)")
    p.add_argument("--teacher", help="teacher checkpoint (default: built from the task)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="seqflow", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit-teacher", help="fit an n-gram teacher on a whitespace-tokenized corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--order", type=int, default=1)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--validation")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_fit_teacher)

    p = sub.add_parser("train", help="train a policy; writes manifest, metrics, checkpoints and summary")
    _run_options(p)
    p.add_argument("--demos", help="demonstration file (question, rationale, answer per line)")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a policy checkpoint")
    _run_options(p)
    p.add_argument("--policy", required=True)
    p.add_argument("--n-samples", type=int, default=1000)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("oracle", help="dump the exact target distribution")
    _run_options(p)
    p.add_argument("--condition", type=int, default=0, help="index into the task's conditions")
    p.add_argument("--min-len", type=int)
    p.add_argument("--max-len", type=int)
    p.add_argument("--cap", type=int, default=DEFAULT_CAP)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_oracle)

    p = sub.add_parser("ablate", help="one training run per value of a config key")
    _run_options(p)
    p.add_argument("--sweep", required=True, metavar="KEY=V1,V2,...")
    p.add_argument("--method", choices=("gfn", "pg"), default="gfn")
    p.add_argument("--demos")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("baseline", help="policy-gradient or decoding baseline with the eval report schema")
    _run_options(p)
    p.add_argument("--method", required=True, help="policy_gradient, greedy, top_k:K, nucleus:P, beam:W, "
                                                   "temperature:T or ancestral")
    p.add_argument("--n-samples", type=int, default=64)
    p.add_argument("--demos")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_baseline)

    p = sub.add_parser("config", help="print configuration defaults")
    p.add_argument("--dump-defaults", action="store_true", required=True)
    p.add_argument("--preset", choices=sorted(ex.PRESETS))
    p.set_defaults(fn=cmd_config)
    return ap


def main(argv: list[str] | None = None) -> int:
    threads = os.environ.get("SEQFLOW_THREADS")
    if threads:
        import torch
        torch.set_num_threads(max(1, int(threads)))
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        print(json.dumps(e.diagnostic, sort_keys=True, default=str), file=sys.stderr)
        return EXIT_NUMERIC
    except EnumerationCapError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CAP
    except (ConfigError, ChecksumError, CorpusError, VocabularyError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
