"""Decoding benchmarks: mean accepted tokens and throughput per (strategy, task).

A cell runs its whole prompt set under one strategy, at least three times,
and reports the median wall-clock figures. Token counts are deterministic,
so mean accepted tokens (committed tokens per decode forward) comes straight
from the counts; speedup is throughput relative to the ar cell of the same
task measured in the same run.
"""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

from .data import BOS, Corpus
from .decode import DraftTreeTemplate, generate

MIN_REPS = 3


@dataclass
class BenchReport:
    rows: list[dict] = field(default_factory=list)

    def row(self, task: str, strategy: str) -> dict:
        for r in self.rows:
            if r["task"] == task and r["strategy"] == strategy:
                return r
        raise KeyError(f"no bench row for task={task!r} strategy={strategy!r}")

    def save_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.rows:
                fh.write(json.dumps(r) + "\n")


def bench_cell(
    weights,
    suite: Corpus,
    strategy: str,
    max_new: int = 64,
    block_len: int = 4,
    template: DraftTreeTemplate | None = None,
    reps: int = MIN_REPS,
    noise_seed: int = 0,
) -> dict:
    """One (strategy, suite) cell: reps full passes over the prompts, median timing."""
    if reps < MIN_REPS:
        raise ValueError(f"bench cells need at least {MIN_REPS} repetitions")
    walls = []
    committed = forwards = 0
    for rep in range(reps):
        t0 = time.perf_counter()
        rep_committed = rep_forwards = 0
        for s in suite.samples:
            _, metrics = generate(
                weights,
                [BOS] + s.prompt,
                strategy,
                max_new=max_new,
                block_len=block_len,
                template=template,
                noise_seed=noise_seed,
            )
            rep_committed += metrics.committed_tokens
            rep_forwards += metrics.decode_forwards
        walls.append(time.perf_counter() - t0)
        committed, forwards = rep_committed, rep_forwards
    wall = statistics.median(walls)
    return {
        "task": suite.name,
        "strategy": strategy,
        "n_prompts": len(suite.samples),
        "committed_tokens": committed,
        "decode_forwards": forwards,
        "mat": committed / forwards if forwards else 0.0,
        "wall_seconds": wall,
        "tokens_per_second": committed / wall if wall > 0 else 0.0,
        "reps": reps,
    }


def run_bench(
    weights,
    suites: list[Corpus],
    strategies: list[str],
    max_new: int = 64,
    block_len: int = 4,
    template: DraftTreeTemplate | None = None,
    reps: int = MIN_REPS,
) -> BenchReport:
    """All (strategy, task) cells; speedup is relative to each task's ar cell."""
    report = BenchReport()
    for suite in suites:
        base_tps = None
        ordered = ["ar"] + [s for s in strategies if s != "ar"] if "ar" in strategies else strategies
        for strategy in ordered:
            row = bench_cell(
                weights, suite, strategy, max_new=max_new, block_len=block_len,
                template=template, reps=reps,
            )
            if strategy == "ar":
                base_tps = row["tokens_per_second"]
            row["speedup_vs_ar"] = (
                row["tokens_per_second"] / base_tps if base_tps else None
            )
            report.rows.append(row)
    return report


def format_table(rows: list[dict]) -> str:
    """Plain-text table of the headline bench numbers."""
    cols = ["task", "strategy", "mat", "tokens_per_second", "speedup_vs_ar", "committed_tokens", "decode_forwards"]
    rendered = [
        [
            f"{r.get(c):.3f}" if isinstance(r.get(c), float) else str(r.get(c, "-"))
            for c in cols
        ]
        for r in rows
    ]
    widths = [max(len(c), *(len(row[i]) for row in rendered)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for row in rendered:
        lines.append("  ".join(v.ljust(w) for v, w in zip(row, widths)))
    return "\n".join(lines)
