"""Command-line front end.

Subcommands: train (TOML config + overrides), generate (continuation to
stdout, metrics JSON to stderr), eval (exact-match or denoise accuracy),
bench (mean-accepted-tokens / throughput table + JSONL report) and sweep
(one-axis studies over training noise length, inference block length, or
the retrieval path toggle).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib  # py311+
except ModuleNotFoundError:  # pragma: no cover - py310 fallback
    import tomli as tomllib

from . import bench as bench_mod
from . import decode as decode_mod
from .checkpoint import load_checkpoint, save_checkpoint
from .data import BOS, EOS, TASKS, Corpus, detokenize, gen_synthetic, load_jsonl, exact_match_eval
from .model import ModelConfig, init_weights
from .noising import NoiseConfig, TrainConfig, denoise_accuracy, train


def _load_config(path: str) -> dict:
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _corpus_from_cfg(data_cfg: dict, max_len: int) -> Corpus:
    if "corpus" in data_cfg:
        return load_jsonl(data_cfg["corpus"], max_len=max_len)
    task = data_cfg.get("task")
    if task is None:
        raise ValueError("config [data] needs either 'corpus' (jsonl path) or 'task'")
    return gen_synthetic(
        task,
        n=int(data_cfg.get("n", 1000)),
        len_range=(int(data_cfg.get("len_lo", 8)), int(data_cfg.get("len_hi", 14))),
        seed=int(data_cfg.get("seed", 0)),
    )


def _train_from_config(cfg: dict, out_path: str) -> tuple[str, dict]:
    model_cfg = ModelConfig(
        **{k: v for k, v in cfg.get("model", {}).items() if k != "init_seed"}
    )
    noise = NoiseConfig(**cfg.get("noise", {}))
    schedule = TrainConfig(**cfg.get("train", {}))
    corpus = _corpus_from_cfg(cfg.get("data", {}), model_cfg.max_positions)
    weights = init_weights(model_cfg, seed=int(cfg.get("model", {}).get("init_seed", 0)))
    report = train(weights, corpus, noise, schedule)
    meta = {
        "noise": dataclasses.asdict(noise),
        "train": dataclasses.asdict(schedule),
        "data": cfg.get("data", {}),
        "final_loss": report.step_losses[-1],
        "epoch_losses": report.epoch_losses,
        "steps": report.steps,
    }
    # wall time stays out of meta so identical configs give identical files
    save_checkpoint(out_path, weights, meta=meta)
    return out_path, {**meta, "wall_seconds": report.wall_seconds}


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config)
    if args.noise_len is not None:
        cfg.setdefault("noise", {})["segment_len"] = args.noise_len
    if args.noise_policy is not None:
        cfg.setdefault("noise", {})["policy"] = args.noise_policy
    if args.seed is not None:
        cfg.setdefault("train", {})["seed"] = args.seed
        cfg.setdefault("noise", {})["seed"] = args.seed
    out = args.out or cfg.get("out", "model.ckpt")
    path, meta = _train_from_config(cfg, out)
    print(
        json.dumps(
            {
                "checkpoint": str(path),
                "steps": meta["steps"],
                "final_loss": meta["final_loss"],
                "epoch_losses": meta["epoch_losses"],
                "wall_seconds": meta["wall_seconds"],
            }
        )
    )
    return 0


def _template_from_args(args: argparse.Namespace):
    if getattr(args, "template", None):
        return decode_mod.load_template(args.template)
    return None


def cmd_generate(args: argparse.Namespace) -> int:
    weights, _ = load_checkpoint(args.ckpt)
    prompt = [BOS] + list(args.prompt.encode("utf-8"))
    tokens, metrics = decode_mod.generate(
        weights,
        prompt,
        args.strategy,
        max_new=args.max_new,
        block_len=args.block_len,
        template=_template_from_args(args),
        max_ngram=args.max_ngram,
        path_len=args.path_len,
        noise_seed=args.noise_seed,
    )
    text_tokens = [t for t in tokens if t < 256]
    sys.stdout.write(detokenize(text_tokens).decode("utf-8", errors="replace"))
    sys.stdout.write("\n")
    print(json.dumps(metrics.to_dict()), file=sys.stderr)
    return 0


def _held_out(task: str, n: int, seed: int, len_range: tuple[int, int] | None = None) -> Corpus:
    if len_range is None:
        return gen_synthetic(task, n=n, seed=seed)
    return gen_synthetic(task, n=n, len_range=len_range, seed=seed)


def _len_range_from_args(args: argparse.Namespace, data_meta: dict, task: str) -> tuple[int, int] | None:
    """Explicit --len-lo/--len-hi win; else reuse the training range for the model's own task."""
    lo, hi = getattr(args, "len_lo", None), getattr(args, "len_hi", None)
    if lo is not None or hi is not None:
        if lo is None or hi is None:
            raise ValueError("--len-lo and --len-hi must be given together")
        return (lo, hi)
    if data_meta.get("task") == task:
        return (int(data_meta.get("len_lo", 8)), int(data_meta.get("len_hi", 14)))
    return None


def cmd_eval(args: argparse.Namespace) -> int:
    weights, meta = load_checkpoint(args.ckpt)
    len_range = _len_range_from_args(args, meta.get("data", {}), args.task)
    suite = _held_out(args.task, args.n, args.seed, len_range)
    if args.metric == "exact":
        def decode_fn(w, prompt):
            toks, _ = decode_mod.generate(w, prompt, args.strategy, max_new=args.max_new)
            return toks

        value = exact_match_eval(weights, suite, decode_fn)
    else:
        noise_len = args.noise_len
        if noise_len is None:
            noise_len = int(meta.get("noise", {}).get("segment_len") or 4) or 4
        noise = NoiseConfig(segment_len=noise_len, policy="random", seed=args.noise_seed)
        value = denoise_accuracy(weights, suite, noise)
    print(json.dumps({"task": args.task, "metric": args.metric, "value": value, "n": len(suite.samples)}))
    return 0


def _suites_from_args(args: argparse.Namespace, max_len: int, data_meta: dict) -> list[Corpus]:
    suites: list[Corpus] = []
    for spec in args.suite or []:
        if "=" in spec:
            name, path = spec.split("=", 1)
            corpus = load_jsonl(path, max_len=max_len)
            corpus.name = name
            suites.append(corpus)
        else:
            suites.append(load_jsonl(spec, max_len=max_len))
    for task in args.task or []:
        suites.append(_held_out(task, args.n, args.seed, _len_range_from_args(args, data_meta, task)))
    if not suites:
        raise ValueError("bench needs --suite or --task")
    return suites


def cmd_bench(args: argparse.Namespace) -> int:
    weights, meta = load_checkpoint(args.ckpt)
    suites = _suites_from_args(args, weights.cfg.max_positions, meta.get("data", {}))
    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    for s in strategies:
        if s not in decode_mod.STRATEGIES:
            raise ValueError(f"unknown strategy {s!r}")
    report = bench_mod.run_bench(
        weights,
        suites,
        strategies,
        max_new=args.max_new,
        block_len=args.block_len,
        template=_template_from_args(args),
        reps=args.reps,
    )
    print(bench_mod.format_table(report.rows))
    if args.report:
        report.save_jsonl(args.report)
        print(f"report written to {args.report}", file=sys.stderr)
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    rows: list[dict] = []
    if args.axis == "train_noise_len":
        if not args.config:
            raise ValueError("sweep over train_noise_len needs --config")
        cfg = _load_config(args.config)
        suite = _held_out(
            args.task, args.n, args.seed, _len_range_from_args(args, cfg.get("data", {}), args.task)
        )
        for v in values:
            cfg.setdefault("noise", {})["segment_len"] = int(v)
            out = str(Path(args.workdir) / f"sweep_L{v}.ckpt")
            Path(args.workdir).mkdir(parents=True, exist_ok=True)
            path, _ = _train_from_config(cfg, out)
            weights, _ = load_checkpoint(path)
            cell = bench_mod.bench_cell(
                weights, suite, "jacobi", max_new=args.max_new, block_len=args.block_len, reps=args.reps
            )
            rows.append({"axis": args.axis, "value": int(v), **cell})
    elif args.axis == "infer_block_len":
        weights, meta = load_checkpoint(args.ckpt)
        suite = _held_out(
            args.task, args.n, args.seed, _len_range_from_args(args, meta.get("data", {}), args.task)
        )
        for v in values:
            cell = bench_mod.bench_cell(
                weights, suite, "jacobi", max_new=args.max_new, block_len=int(v), reps=args.reps
            )
            rows.append({"axis": args.axis, "value": int(v), **cell})
    elif args.axis == "retrieval_on_off":
        weights, meta = load_checkpoint(args.ckpt)
        suite = _held_out(
            args.task, args.n, args.seed, _len_range_from_args(args, meta.get("data", {}), args.task)
        )
        for v in values:
            if v not in ("on", "off"):
                raise ValueError("retrieval_on_off values must be 'on' or 'off'")
            cell = bench_mod.bench_cell(
                weights, suite, "tr-jacobi" if v == "on" else "tree",
                max_new=args.max_new, reps=args.reps,
            )
            rows.append({"axis": args.axis, "value": v, **cell})
    else:
        raise ValueError(f"unknown sweep axis {args.axis!r}")
    for r in rows:
        print(json.dumps(r))
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            for r in rows:
                fh.write(json.dumps(r) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tinyspec", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a TOML config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", default=None, help="checkpoint path (overrides config)")
    t.add_argument("--noise-len", type=int, default=None, help="override noise segment length")
    t.add_argument("--noise-policy", choices=("random", "ppl"), default=None)
    t.add_argument("--seed", type=int, default=None, help="override train+noise seeds")
    t.set_defaults(fn=cmd_train)

    g = sub.add_parser("generate", help="decode a continuation for a prompt")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--prompt", required=True)
    g.add_argument("--strategy", choices=decode_mod.STRATEGIES, default="ar")
    g.add_argument("--max-new", type=int, default=64)
    g.add_argument("--block-len", type=int, default=decode_mod.DEFAULT_BLOCK_LEN)
    g.add_argument("--template", default=None, help="draft tree template file")
    g.add_argument("--max-ngram", type=int, default=decode_mod.DEFAULT_MAX_NGRAM)
    g.add_argument("--path-len", type=int, default=decode_mod.DEFAULT_PATH_LEN)
    g.add_argument("--noise-seed", type=int, default=0)
    g.set_defaults(fn=cmd_generate)

    e = sub.add_parser("eval", help="score a checkpoint on a synthetic task")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--task", choices=TASKS, required=True)
    e.add_argument("--metric", choices=("exact", "denoise"), default="exact")
    e.add_argument("--strategy", choices=decode_mod.STRATEGIES, default="ar")
    e.add_argument("--n", type=int, default=200)
    e.add_argument("--seed", type=int, default=999)
    e.add_argument("--len-lo", type=int, default=None, help="suite length range (default: the model's training range)")
    e.add_argument("--len-hi", type=int, default=None)
    e.add_argument("--max-new", type=int, default=64)
    e.add_argument("--noise-len", type=int, default=None, help="denoise: noise segment length")
    e.add_argument("--noise-seed", type=int, default=123)
    e.set_defaults(fn=cmd_eval)

    b = sub.add_parser("bench", help="mean accepted tokens + throughput per strategy")
    b.add_argument("--ckpt", required=True)
    b.add_argument("--suite", action="append", help="name=path.jsonl prompt set (repeatable)")
    b.add_argument("--task", action="append", choices=TASKS, help="generate a held-out suite")
    b.add_argument("--n", type=int, default=50)
    b.add_argument("--seed", type=int, default=999)
    b.add_argument("--len-lo", type=int, default=None, help="suite length range (default: the model's training range)")
    b.add_argument("--len-hi", type=int, default=None)
    b.add_argument("--strategies", default="ar,jacobi,pld,tree,tr-jacobi")
    b.add_argument("--max-new", type=int, default=64)
    b.add_argument("--block-len", type=int, default=decode_mod.DEFAULT_BLOCK_LEN)
    b.add_argument("--template", default=None)
    b.add_argument("--reps", type=int, default=bench_mod.MIN_REPS)
    b.add_argument("--report", default=None, help="write rows as JSONL")
    b.set_defaults(fn=cmd_bench)

    s = sub.add_parser("sweep", help="one-axis study; rows as JSONL")
    s.add_argument("--axis", choices=("train_noise_len", "infer_block_len", "retrieval_on_off"), required=True)
    s.add_argument("--values", required=True, help="comma-separated axis values")
    s.add_argument("--config", default=None, help="train config (train_noise_len axis)")
    s.add_argument("--ckpt", default=None, help="checkpoint (inference axes)")
    s.add_argument("--task", choices=TASKS, default="copy")
    s.add_argument("--n", type=int, default=50)
    s.add_argument("--seed", type=int, default=999)
    s.add_argument("--len-lo", type=int, default=None, help="suite length range (default: the model's training range)")
    s.add_argument("--len-hi", type=int, default=None)
    s.add_argument("--max-new", type=int, default=64)
    s.add_argument("--block-len", type=int, default=decode_mod.DEFAULT_BLOCK_LEN)
    s.add_argument("--reps", type=int, default=bench_mod.MIN_REPS)
    s.add_argument("--workdir", default="sweep_runs")
    s.add_argument("--report", default=None)
    s.set_defaults(fn=cmd_sweep)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
