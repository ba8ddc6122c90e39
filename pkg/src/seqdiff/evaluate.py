"""Exact-match scoring, throughput measurement and report emission."""

from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import dataclass, asdict
from typing import Callable, Sequence

__all__ = ["EvalReport", "accuracy", "throughput", "reasoning_steps", "write_report"]

REPORT_SCHEMA_VERSION = 1
_CSV_COLUMNS = ("schema_version", "accuracy", "throughput_it_per_s", "avg_forward_calls", "n", "config_hash")


@dataclass
class EvalReport:
    accuracy: float
    throughput_it_per_s: float
    avg_forward_calls: float
    n: int
    config_hash: str


def accuracy(preds: Sequence[str], golds: Sequence[str]) -> float:
    """Fraction of exact string matches after whitespace trim."""
    if len(preds) != len(golds):
        raise ValueError(f"length mismatch: {len(preds)} predictions vs {len(golds)} golds")
    if not preds:
        raise ValueError("need at least one prediction")
    hits = sum(1 for p, g in zip(preds, golds) if p.strip() == g.strip())
    return hits / len(preds)


def throughput(runner: Callable, test_set: Sequence, warmup: int = 1) -> float:
    """Samples per second over a batch-size-1 loop, warmup iterations excluded."""
    if not test_set:
        raise ValueError("empty test set")
    if warmup >= len(test_set):
        raise ValueError(f"warmup {warmup} leaves no timed items out of {len(test_set)}")
    for item in test_set[:warmup]:
        runner(item)
    timed = test_set[warmup:]
    t0 = time.monotonic()
    for item in timed:
        runner(item)
    elapsed = time.monotonic() - t0
    return len(timed) / max(elapsed, 1e-12)


def reasoning_steps(outputs: Sequence) -> float:
    """Mean number of model forward calls per sample."""
    if not outputs:
        raise ValueError("need at least one output")
    return sum(o.forward_calls for o in outputs) / len(outputs)


def write_report(report: EvalReport, json_path=None, csv_path=None) -> None:
    """Dump the report as JSON and append a row to the fixed-column results CSV."""
    if json_path is not None:
        with open(json_path, "w", encoding="utf-8") as f:
            json.dump({"schema_version": REPORT_SCHEMA_VERSION, **asdict(report)}, f, indent=1)
    if csv_path is not None:
        fresh = not os.path.exists(csv_path) or os.path.getsize(csv_path) == 0
        with open(csv_path, "a", newline="") as f:
            w = csv.writer(f)
            if fresh:
                w.writerow(_CSV_COLUMNS)
            row = {"schema_version": REPORT_SCHEMA_VERSION, **asdict(report)}
            w.writerow([row[c] for c in _CSV_COLUMNS])
