"""Report artifacts: per-cell means with trial counts, a JSON summary and episode logs."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

ALPHA = 0.05


@dataclass
class Cell:
    name: str
    metric: str
    values: list[float]
    seed: int = 0
    episodes: list[dict] = field(default_factory=list)
    per_task: dict[str, float] = field(default_factory=dict)

    @property
    def mean(self) -> float:
        return float(np.mean(self.values)) if self.values else float("nan")

    @property
    def n(self) -> int:
        return len(self.values)


@dataclass
class Report:
    kind: str
    config_hash: str
    seeds: list[int]
    cells: list[Cell] = field(default_factory=list)
    reference: str | None = None  # cell every other cell is tested against
    notes: dict = field(default_factory=dict)

    def get(self, name: str, metric: str | None = None) -> Cell:
        for c in self.cells:
            if c.name == name and (metric is None or c.metric == metric):
                return c
        raise KeyError((name, metric))

    def means(self, metric: str | None = None) -> dict[str, float]:
        return {c.name: c.mean for c in self.cells if metric is None or c.metric == metric}


def welch_t(a, b) -> tuple[float, float]:
    """Two-sided unequal-variance t-test as (t, p).

    Zero variance in both samples is resolved by hand: equal means give (0, 1),
    different means give (+-inf, 0).
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        return float("nan"), 1.0
    va, vb = a.var(ddof=1), b.var(ddof=1)
    if va == 0 and vb == 0:
        diff = a.mean() - b.mean()
        if diff == 0:
            return 0.0, 1.0
        return math.copysign(math.inf, diff), 0.0
    res = stats.ttest_ind(a, b, equal_var=False)
    return float(res.statistic), float(res.pvalue)


def emit_report(report: Report, out) -> Path:
    out = Path(out)
    (out / "episodes").mkdir(parents=True, exist_ok=True)
    rows = []
    for c in report.cells:
        ref = None
        if report.reference and c.name != report.reference:
            try:
                ref = report.get(report.reference, c.metric)
            except KeyError:
                ref = None
        t, p = welch_t(c.values, ref.values) if ref is not None else (float("nan"), float("nan"))
        rows.append({"cell": c.name, "metric": c.metric, "seed": c.seed, "n": c.n, "mean": c.mean,
                     "std": float(np.std(c.values, ddof=1)) if c.n > 1 else 0.0,
                     "vs": report.reference if ref is not None else "", "t": t, "p": p,
                     "significant": bool(ref is not None and p < ALPHA)})
        if c.episodes:
            with open(out / "episodes" / f"{c.name}-{c.metric}-{c.seed}.jsonl", "w") as f:
                for e in c.episodes:
                    f.write(json.dumps(e, sort_keys=True) + "\n")
    with open(out / "cells.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["cell", "metric", "seed", "n", "mean", "std", "vs", "t", "p",
                                          "significant"])
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    summary = {
        "kind": report.kind,
        "config_hash": report.config_hash,
        "seeds": report.seeds,
        "reference": report.reference,
        "cells": [{"cell": r["cell"], "metric": r["metric"], "seed": r["seed"], "n": r["n"], "mean": _num(r["mean"]),
                   "p": _num(r["p"]), "significant": r["significant"]} for r in rows],
        "per_task": {f"{c.name}/{c.metric}": c.per_task for c in report.cells if c.per_task},
        "notes": report.notes,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return out


def _num(v: float):
    return None if isinstance(v, float) and math.isnan(v) else v


def episode_row(ep) -> dict:
    return {"task": ep.task, "env_id": ep.env_id, "score": ep.score, "success": ep.success,
            "first_pick": ep.first_pick, "subtasks": list(ep.subtask_log), "length": ep.length}
