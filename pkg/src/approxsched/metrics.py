"""Per-minute and aggregate serving metrics, with a stable CSV form."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields
from os import PathLike
from typing import Sequence

import numpy as np

COLUMNS = (
    "minute",
    "throughput_qpm",
    "slo_violation_ratio",
    "effective_quality",
    "relative_quality_pct",
    "utilization_pct",
)
AGGREGATE = "aggregate"


@dataclass(frozen=True)
class MinuteRow:
    minute: int
    throughput_qpm: float
    slo_violation_ratio: float
    effective_quality: float
    relative_quality_pct: float
    utilization_pct: float


@dataclass(frozen=True)
class MetricsReport:
    per_minute: tuple[MinuteRow, ...]
    aggregate: MinuteRow
    slo_threshold_s: float
    n_arrivals: int = 0
    n_completed: int = 0
    n_unfinished: int = 0
    empty: bool = False

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.per_minute], dtype=float)


@dataclass
class CompletionLog:
    """Column store of finished prompts, appended in completion order."""

    prompt: list = field(default_factory=list)
    arrival_s: list = field(default_factory=list)
    start_s: list = field(default_factory=list)
    finish_s: list = field(default_factory=list)
    variant: list = field(default_factory=list)
    quality: list = field(default_factory=list)
    best_quality: list = field(default_factory=list)
    retrieval_s: list = field(default_factory=list)
    worker: list = field(default_factory=list)

    def append(self, prompt, arrival_s, start_s, finish_s, variant, quality, best_quality, retrieval_s, worker):
        self.prompt.append(prompt)
        self.arrival_s.append(arrival_s)
        self.start_s.append(start_s)
        self.finish_s.append(finish_s)
        self.variant.append(variant)
        self.quality.append(quality)
        self.best_quality.append(best_quality)
        self.retrieval_s.append(retrieval_s)
        self.worker.append(worker)

    def __len__(self) -> int:
        return len(self.prompt)

    def array(self, name: str) -> np.ndarray:
        return np.asarray(getattr(self, name), dtype=float)

    def records(self):
        for vals in zip(*(getattr(self, f.name) for f in fields(self))):
            yield CompletionRecord(*vals)


@dataclass(frozen=True)
class CompletionRecord:
    prompt: int
    arrival_s: float
    start_s: float
    finish_s: float
    variant: str
    quality: float
    best_quality: float
    retrieval_s: float
    worker: int


def _spread(bins: np.ndarray, start: float, end: float) -> None:
    """Add the interval ``[start, end)`` in seconds to per-minute bins."""
    if end <= start:
        return
    m0, m1 = int(start // 60), int(math.ceil(end / 60))
    for m in range(max(m0, 0), min(m1, len(bins))):
        lo, hi = max(start, m * 60.0), min(end, (m + 1) * 60.0)
        if hi > lo:
            bins[m] += hi - lo


@dataclass
class Utilization:
    """Busy and alive worker-seconds, bucketed per minute."""

    n_minutes: int
    busy: np.ndarray = None
    alive: np.ndarray = None

    def __post_init__(self):
        self.busy = np.zeros(self.n_minutes)
        self.alive = np.zeros(self.n_minutes)

    def add_busy(self, start: float, end: float) -> None:
        _spread(self.busy, start, end)

    def add_alive(self, start: float, end: float) -> None:
        _spread(self.alive, start, end)


def slo_threshold(latencies: Sequence[float], factor: float = 3.0) -> float:
    return factor * max(latencies)


def finalize(
    completions: CompletionLog | Sequence[CompletionRecord],
    n_arrivals: int,
    slo_threshold_s: float,
    run_duration_s: float,
    utilization: Utilization | None = None,
) -> MetricsReport:
    """Bucket completions by finish minute and compute every metric.

    Unfinished prompts (``n_arrivals`` minus completions) count as SLO
    violations in the aggregate; per-minute ratios use that minute's
    completions only.
    """
    if not isinstance(completions, CompletionLog):
        log = CompletionLog()
        for r in completions:
            log.append(r.prompt, r.arrival_s, r.start_s, r.finish_s, r.variant, r.quality,
                       r.best_quality, r.retrieval_s, r.worker)
        completions = log
    n_minutes = int(math.ceil(run_duration_s / 60.0 - 1e-12)) if run_duration_s > 0 else 0
    finish = completions.array("finish_s")
    latency = finish - completions.array("arrival_s")
    quality = completions.array("quality")
    rel = 100.0 * quality / np.maximum(completions.array("best_quality"), 1e-12)
    violated = latency > slo_threshold_s
    minute = np.minimum((finish // 60).astype(int), max(n_minutes - 1, 0))

    if utilization is None:
        utilization = Utilization(n_minutes)

    rows = []
    for m in range(n_minutes):
        sel = minute == m
        n = int(sel.sum())
        ok = sel & ~violated
        rows.append(
            MinuteRow(
                m,
                float(n),
                float(violated[sel].mean()) if n else 0.0,
                float(quality[ok].mean()) if ok.any() else 0.0,
                float(rel[sel].mean()) if n else 0.0,
                _util_pct(utilization.busy[m], utilization.alive[m]) if m < utilization.n_minutes else 0.0,
            )
        )

    n_done = len(completions)
    unfinished = max(n_arrivals - n_done, 0)
    total = n_done + unfinished
    ok = ~violated
    aggregate = MinuteRow(
        -1,
        float(n_done / n_minutes) if n_minutes else 0.0,
        float((violated.sum() + unfinished) / total) if total else 0.0,
        float(quality[ok].mean()) if ok.any() else 0.0,
        float(rel.mean()) if n_done else 0.0,
        _util_pct(utilization.busy.sum(), utilization.alive.sum()),
    )
    return MetricsReport(
        tuple(rows), aggregate, float(slo_threshold_s), int(n_arrivals), n_done, unfinished, empty=n_done == 0
    )


def _util_pct(busy: float, alive: float) -> float:
    if alive <= 0:
        return 0.0
    return float(min(100.0, 100.0 * busy / alive))


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def export_csv(report: MetricsReport, path: str | PathLike) -> None:
    """Header, one row per minute, then the aggregate row."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in report.per_minute:
            w.writerow([_fmt(getattr(r, c)) for c in COLUMNS])
        a = report.aggregate
        w.writerow([AGGREGATE] + [_fmt(getattr(a, c)) for c in COLUMNS[1:]])


def read_csv(path: str | PathLike, slo_threshold_s: float = float("nan")) -> MetricsReport:
    rows, aggregate = [], None
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != COLUMNS:
            raise ValueError(f"unexpected CSV header {header}")
        for rec in reader:
            vals = [float(x) for x in rec[1:]]
            if rec[0] == AGGREGATE:
                aggregate = MinuteRow(-1, *vals)
            else:
                rows.append(MinuteRow(int(rec[0]), *vals))
    if aggregate is None:
        raise ValueError("CSV has no aggregate row")
    return MetricsReport(tuple(rows), aggregate, slo_threshold_s)
