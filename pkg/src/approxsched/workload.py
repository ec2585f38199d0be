"""Arrival streams and synthetic per-prompt quality.

Traces are plain numpy arrays of arrival times in seconds. Prompt quality is
synthesized constructively so that each prompt's optimal variant is exactly
the one sampled from the target affinity histogram.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from os import PathLike
from typing import Mapping, Sequence

import numpy as np

from .catalog import Catalog, Strategy, optimal_variant

logger = logging.getLogger(__name__)


class TraceError(ValueError):
    pass


@dataclass(frozen=True)
class ArrivalTrace:
    times: np.ndarray
    name: str = "trace"
    duration_s: float = 0.0
    n_reordered: int = 0

    def __len__(self) -> int:
        return len(self.times)

    def checksum(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.times, dtype="<f8").tobytes()).hexdigest()[:16]


def load_trace(path: str | PathLike) -> ArrivalTrace:
    """Read one arrival time (seconds) per line; an optional tag may follow.

    Blank lines and ``#`` comments are skipped. Out-of-order records are
    stably sorted and counted in ``n_reordered``.
    """
    times: list[float] = []
    duration = None
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            if raw.startswith("# duration_s "):
                duration = float(raw.split()[2])
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            head = line.split(None, 1)[0].rstrip(",")
            try:
                t = float(head)
            except ValueError:
                raise TraceError(f"{path}:{lineno}: cannot parse arrival time {head!r}") from None
            if not math.isfinite(t) or t < 0:
                raise TraceError(f"{path}:{lineno}: arrival time must be finite and >= 0, got {t}")
            times.append(t)
    if not times:
        raise TraceError(f"{path}: trace is empty")
    arr = np.asarray(times, dtype=float)
    n_reordered = int(np.count_nonzero(np.diff(arr) < 0))
    if n_reordered:
        logger.warning("%s: %d out-of-order arrivals, sorting", path, n_reordered)
        arr = np.sort(arr, kind="stable")
    name = str(getattr(path, "name", path))
    # A saved trace records its window length; otherwise it ends at the last arrival.
    duration_s = max(duration, float(arr[-1])) if duration is not None else float(arr[-1])
    return ArrivalTrace(arr, name=name, duration_s=duration_s, n_reordered=n_reordered)


def save_trace(trace: ArrivalTrace, path: str | PathLike) -> None:
    with open(path, "w") as fh:
        fh.write(f"# duration_s {float(trace.duration_s)!r}\n")
        for t in trace.times:
            fh.write(f"{float(t)!r}\n")


def _poisson_segments(rates_qpm: np.ndarray, starts_s: np.ndarray, lengths_s: np.ndarray, rng) -> np.ndarray:
    expected = rates_qpm * lengths_s / 60.0
    counts = rng.poisson(expected)
    offsets = rng.random(int(counts.sum()))
    times = np.repeat(starts_s, counts) + offsets * np.repeat(lengths_s, counts)
    return np.sort(times)


def gen_ramp(start_qpm: float, end_qpm: float, duration_min: int, seed: int) -> ArrivalTrace:
    """Poisson arrivals whose rate grows linearly, piecewise constant per minute."""
    if start_qpm <= 0 or end_qpm < start_qpm:
        raise ValueError("need 0 < start_qpm <= end_qpm")
    rng = np.random.default_rng(seed)
    n = int(duration_min)
    if n <= 0:
        return ArrivalTrace(np.empty(0), name="ramp", duration_s=0.0)
    minutes = np.arange(n)
    rates = start_qpm + (end_qpm - start_qpm) * (minutes + 0.5) / n
    times = _poisson_segments(rates, minutes * 60.0, np.full(n, 60.0), rng)
    return ArrivalTrace(times, name=f"ramp-{start_qpm:g}-{end_qpm:g}", duration_s=n * 60.0)


def bursty_segments(low_qpm, high_qpm, period_min, duty, duration_min):
    """(start_min, length_min, rate_qpm) segments: low phase, then high phase."""
    if not 0 < duty < 1:
        raise ValueError("duty must be in (0, 1)")
    if period_min <= 0:
        raise ValueError("period_min must be positive")
    segs = []
    t = 0.0
    low_len = (1 - duty) * period_min
    while t < duration_min - 1e-12:
        for rate, length in ((low_qpm, low_len), (high_qpm, duty * period_min)):
            length = min(length, duration_min - t)
            if length > 1e-12:
                segs.append((t, length, rate))
            t += length
    return segs


def gen_bursty(
    low_qpm: float, high_qpm: float, period_min: float, duty: float, duration_min: float, seed: int
) -> ArrivalTrace:
    """Alternating low/high-rate Poisson segments; ``duty`` is the high fraction."""
    segs = bursty_segments(low_qpm, high_qpm, period_min, duty, duration_min)
    rng = np.random.default_rng(seed)
    if not segs:
        return ArrivalTrace(np.empty(0), name="bursty", duration_s=0.0)
    starts, lengths, rates = (np.array(x, dtype=float) for x in zip(*segs))
    times = _poisson_segments(rates, starts * 60.0, lengths * 60.0, rng)
    return ArrivalTrace(times, name=f"bursty-{low_qpm:g}-{high_qpm:g}", duration_s=duration_min * 60.0)


def gen_constant(qpm: float, duration_min: int, seed: int) -> ArrivalTrace:
    return gen_ramp(qpm, qpm, duration_min, seed)


# Fractions of prompts whose optimal variant sits at each level, slow to fast.
DEFAULT_HISTOGRAMS = {
    Strategy.SM: {"sdxl": 0.35, "sd15": 0.10, "small": 0.15, "tiny": 0.40},
    Strategy.AC: {"ac-k0": 0.25, "ac-k5": 0.10, "ac-k10": 0.10, "ac-k15": 0.15, "ac-k20": 0.15, "ac-k25": 0.25},
}


@dataclass(frozen=True)
class AffinityModel:
    """Target optimal-variant histograms and the quality synthesis knobs.

    A prompt has a base score ``b``; variants no faster than its target keep
    at least ``(1 - tolerant_drop) * b``, faster ones fall below
    ``delta * b`` by ``miss_margin`` plus ``miss_slope`` per extra level,
    growing quadratically with the gap.
    """

    histograms: Mapping[Strategy, Mapping[str, float]] = field(
        default_factory=lambda: DEFAULT_HISTOGRAMS
    )
    base_quality_mean: float = 20.9
    base_quality_sd: float = 0.8
    tolerant_drop: float = 0.06
    miss_margin: tuple[float, float] = (0.005, 0.05)
    miss_slope: float = 0.025

    def __post_init__(self):
        for strategy, hist in self.histograms.items():
            vals = np.array(list(hist.values()), dtype=float)
            if np.any(vals < 0) or abs(vals.sum() - 1.0) > 1e-9:
                raise ValueError(f"{Strategy(strategy).value} histogram must be a distribution")

    def probs(self, catalog: Catalog, strategy: Strategy) -> np.ndarray:
        hist = self.histograms[strategy]
        unknown = set(hist) - set(catalog.ids(strategy))
        if unknown:
            raise ValueError(f"histogram names unknown variants {sorted(unknown)}")
        return np.array([hist.get(vid, 0.0) for vid in catalog.ids(strategy)])


@dataclass
class PromptRequest:
    id: int
    arrival_time_s: float
    quality_vector: dict[str, float]
    true_optimal: dict[Strategy, str]
    predicted_optimal: dict[Strategy, str] = field(default_factory=dict)

    def best_quality(self) -> float:
        return max(self.quality_vector.values())


@dataclass
class PromptBatch:
    """Column-oriented prompts: row ``i`` is prompt ``i``.

    ``quality`` columns follow ``variant_ids``; ``targets[s]`` holds the true
    optimal level index under strategy ``s``.
    """

    variant_ids: tuple[str, ...]
    quality: np.ndarray
    targets: dict[Strategy, np.ndarray]

    def __len__(self) -> int:
        return self.quality.shape[0]

    def request(self, i: int, arrival_time_s: float, catalog: Catalog) -> PromptRequest:
        qv = dict(zip(self.variant_ids, self.quality[i].tolist()))
        opt = {s: catalog.variants(s)[int(t[i])].id for s, t in self.targets.items()}
        return PromptRequest(i, arrival_time_s, qv, opt)


def _level_profile(levels: np.ndarray, targets: np.ndarray, tol, margin, slope, delta) -> np.ndarray:
    """Fraction of base quality per (prompt, level)."""
    t = targets[:, None]
    lv = levels[None, :]
    gap = lv - t
    kept = 1.0 - tol[:, None] * lv / np.maximum(t, 1)
    missed = delta - margin[:, None] - slope * (gap - 1) * gap / 2.0
    return np.where(gap <= 0, kept, missed)


def synthesize_batch(rng: np.random.Generator, affinity: AffinityModel, catalog: Catalog, n: int) -> PromptBatch:
    """Draw ``n`` prompts; each strategy's target is sampled from its histogram."""
    if not affinity.tolerant_drop < 1 - catalog.delta:
        raise ValueError("tolerant_drop must be below 1 - delta")
    base = rng.normal(affinity.base_quality_mean, affinity.base_quality_sd, size=n)
    base = np.maximum(base, 1e-3)
    ids: list[str] = []
    cols: list[np.ndarray] = []
    targets: dict[Strategy, np.ndarray] = {}
    lo, hi = affinity.miss_margin
    for strategy in catalog.strategies:
        k = len(catalog.variants(strategy))
        if strategy in affinity.histograms:
            p = affinity.probs(catalog, strategy)
        else:
            p = np.full(k, 1.0 / k)
        tgt = rng.choice(k, size=n, p=p)
        tol = rng.uniform(0.0, affinity.tolerant_drop, size=n)
        margin = rng.uniform(lo, hi, size=n)
        frac = _level_profile(np.arange(k), tgt, tol, margin, affinity.miss_slope, catalog.delta)
        cols.append(base[:, None] * np.maximum(frac, 0.05))
        ids.extend(catalog.ids(strategy))
        targets[strategy] = tgt
    quality = np.hstack(cols) if cols else np.empty((n, 0))
    return PromptBatch(tuple(ids), quality, targets)


def synthesize_prompt(rng: np.random.Generator, affinity: AffinityModel, catalog: Catalog, id: int = 0, arrival_time_s: float = 0.0) -> PromptRequest:
    batch = synthesize_batch(rng, affinity, catalog, 1)
    req = batch.request(0, arrival_time_s, catalog)
    req.id = id
    # Constructive guarantee, cheap enough to assert per prompt.
    for s, vid in req.true_optimal.items():
        qv = {v: req.quality_vector[v] for v in catalog.ids(s)}
        assert optimal_variant(qv, catalog, s).id == vid
    return req


def empirical_histogram(targets: np.ndarray, k: int) -> np.ndarray:
    return np.bincount(targets, minlength=k) / max(len(targets), 1)


def per_minute_counts(trace: ArrivalTrace) -> np.ndarray:
    n = int(math.ceil(trace.duration_s / 60.0)) if trace.duration_s > 0 else 0
    if n == 0:
        return np.zeros(0, dtype=int)
    return np.bincount(np.minimum((trace.times // 60).astype(int), n - 1), minlength=n)


def concat_traces(traces: Sequence[ArrivalTrace], name: str = "concat") -> ArrivalTrace:
    """Append traces back to back, shifting each by the previous durations."""
    parts, offset = [], 0.0
    for tr in traces:
        parts.append(tr.times + offset)
        offset += tr.duration_s
    times = np.concatenate(parts) if parts else np.empty(0)
    return ArrivalTrace(times, name=name, duration_s=offset)
