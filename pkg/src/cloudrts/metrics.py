"""Metric rows, the per-rescale stream, and iteration-time summaries."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Iterable, Optional, Sequence

# Every key a scenario may record, with its unit. Recording anything else is
# an error so that a typo in a scenario cannot silently create a new series.
KEYS = {
    "time_per_iter_s": "s",
    "e2e_runtime_s": "s",
    "e2e_baseline_s": "s",
    "overhead_fraction": "1",
    "rescale_total_s": "s",
    "checkpoint_s": "s",
    "load_balance_s": "s",
    "restart_s": "s",
    "restore_s": "s",
    "rescale_count": "count",
    "restart_count": "count",
    "lb_count": "count",
    "iterations": "count",
    "chares": "count",
    "pes": "count",
    "instances": "count",
    "interruptions": "count",
    "lb_improvement": "1",
    "lb_makespan_ratio": "1",
    "daemon_startup_delta": "1",
}

METRICS_HEADER = ["scenario", "seed", "key", "value", "unit"]
RESCALES_HEADER = ["scenario", "run_seed", "event_index", "kind", "mode", "checkpoint_s",
                   "lb_s", "restart_s", "restore_s", "total_s"]


class MetricsError(ValueError):
    pass


def _fmt(value: float) -> str:
    if isinstance(value, int):
        return str(value)
    return format(float(value), ".12g")


@dataclass(frozen=True)
class MetricRow:
    scenario: str
    seed: int
    key: str
    value: float
    unit: str

    def cells(self) -> list[str]:
        return [self.scenario, str(self.seed), self.key, _fmt(self.value), self.unit]


@dataclass(frozen=True)
class RescaleRow:
    scenario: str
    run_seed: int
    event_index: int
    kind: str
    mode: str
    checkpoint_s: float
    lb_s: float
    restart_s: float
    restore_s: float
    total_s: float

    def cells(self) -> list[str]:
        return [self.scenario, str(self.run_seed), str(self.event_index), self.kind, self.mode,
                *(_fmt(v) for v in (self.checkpoint_s, self.lb_s, self.restart_s,
                                    self.restore_s, self.total_s))]


class Recorder:
    """Buffers rows for one scenario invocation and writes them out at the end."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.rows: list[MetricRow] = []
        self.rescales: list[RescaleRow] = []

    def record(self, scenario: str, key: str, value: float) -> MetricRow:
        if key not in KEYS:
            raise MetricsError(f"unknown metric key {key!r}")
        row = MetricRow(scenario, self.seed, key, value, KEYS[key])
        self.rows.append(row)
        return row

    def record_rescale(self, scenario: str, index: int, kind: str, mode: str, timings) -> RescaleRow:
        row = RescaleRow(scenario, self.seed, index, kind, mode, timings.checkpoint,
                         timings.load_balance, timings.restart, timings.restore, timings.total)
        self.rescales.append(row)
        return row

    def get(self, scenario: str, key: str) -> float:
        for row in self.rows:
            if row.scenario == scenario and row.key == key:
                return row.value
        raise KeyError((scenario, key))

    def metrics_csv(self) -> str:
        return _csv(METRICS_HEADER, (r.cells() for r in self.rows))

    def rescales_csv(self) -> str:
        return _csv(RESCALES_HEADER, (r.cells() for r in self.rescales))

    def flush(self, out_dir, json_mirror: bool = False) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "metrics.csv"
        path.write_text(self.metrics_csv())
        (out / "rescales.csv").write_text(self.rescales_csv())
        if json_mirror:
            doc = {"metrics": [asdict(r) for r in self.rows],
                   "rescales": [asdict(r) for r in self.rescales]}
            (out / "metrics.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
        return path


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def iteration_intervals(done_at: dict, start: float = 0.0) -> list[tuple[int, float, float]]:
    """``(iteration, begin, end)`` per completed iteration from completion times."""
    out = []
    prev = start
    for it in sorted(done_at):
        out.append((it, prev, done_at[it]))
        prev = done_at[it]
    return out


def summarize(intervals: Sequence[tuple[int, float, float]],
              windows: Iterable[tuple[float, float]] = (), warmup: int = 5) -> float:
    """Mean iteration time.

    Iteration ``k`` spans from the completion of iteration ``k-1`` to its own
    completion. Iterations with ``k < warmup`` are dropped, as is every
    iteration whose span intersects a rescale or load-balancing window
    ``(start, end)`` (touching endpoints do not count).
    """
    if not intervals:
        raise MetricsError("no iterations to summarise")
    windows = list(windows)
    kept = []
    for it, a, b in intervals:
        if it < warmup:
            continue
        if any(a < we and ws < b for ws, we in windows):
            continue
        kept.append(b - a)
    if not kept:
        raise MetricsError(
            f"every one of {len(intervals)} iterations falls in the first {warmup} "
            f"or inside one of {len(windows)} rescale/balancing windows")
    return sum(kept) / len(kept)


def overhead_fraction(e2e: float, baseline: float) -> float:
    if baseline <= 0:
        raise MetricsError("baseline runtime must be positive")
    return (e2e - baseline) / baseline
