"""Optimal-variant prediction and the look-back affinity histogram.

The trained prompt classifier is replaced by an oracle with a configurable
hit rate; misses are drawn from an error kernel around the true level.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .catalog import Catalog, Strategy
from .workload import PromptRequest

DEFAULT_WINDOW = 1000


def error_kernel(kind: str, k: int) -> np.ndarray:
    """Row-stochastic ``k x k`` matrix: row ``t`` is the miss distribution.

    ``adjacent`` splits misses between the neighbouring levels, ``uniform``
    spreads them over every other level, ``faster`` always predicts one level
    faster (clamped at the fastest).
    """
    m = np.zeros((k, k))
    for t in range(k):
        if kind == "adjacent":
            nb = [j for j in (t - 1, t + 1) if 0 <= j < k]
        elif kind == "uniform":
            nb = [j for j in range(k) if j != t]
        elif kind == "faster":
            nb = [min(t + 1, k - 1)]
        elif kind == "slower":
            nb = [max(t - 1, 0)]
        else:
            raise ValueError(f"unknown error kernel {kind!r}")
        nb = nb or [t]
        m[t, nb] = 1.0 / len(nb)
    return m


@dataclass(frozen=True)
class ClassifierOracle:
    accuracy: float = 1.0
    kernel: str = "adjacent"
    # (time_s, accuracy) step changes, applied in time order.
    drift: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        for p in (self.accuracy, *(a for _, a in self.drift)):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"accuracy must be in [0, 1], got {p}")

    def accuracy_at(self, t: float | np.ndarray):
        acc = np.full(np.shape(t), self.accuracy, dtype=float)
        for start, a in sorted(self.drift):
            acc = np.where(np.asarray(t) >= start, a, acc)
        return acc if np.ndim(t) else float(acc)


def predict_levels(
    oracle: ClassifierOracle, true_levels: np.ndarray, k: int, rng: np.random.Generator, times=None
) -> np.ndarray:
    """Vectorised prediction over an array of true level indices."""
    true_levels = np.asarray(true_levels, dtype=int)
    n = len(true_levels)
    acc = oracle.accuracy_at(np.zeros(n) if times is None else np.asarray(times))
    hit = rng.random(n) < acc
    cdf = np.cumsum(error_kernel(oracle.kernel, k), axis=1)
    u = rng.random(n)
    miss = (u[:, None] >= cdf[true_levels]).sum(axis=1)
    return np.where(hit, true_levels, np.minimum(miss, k - 1))


def predict(
    oracle: ClassifierOracle,
    prompt: PromptRequest,
    rng: np.random.Generator,
    catalog: Catalog,
    strategy: Strategy = Strategy.AC,
) -> str:
    """Predicted optimal variant id for ``prompt``; also stored on the prompt."""
    ids = catalog.ids(strategy)
    true_level = ids.index(prompt.true_optimal[strategy])
    level = int(predict_levels(oracle, np.array([true_level]), len(ids), rng, [prompt.arrival_time_s])[0])
    prompt.predicted_optimal[strategy] = ids[level]
    return ids[level]


@dataclass(frozen=True)
class AffinityHistogram:
    probs: Mapping[str, float]
    window_size: int
    fallback: bool = False

    def vector(self, ids: Sequence[str]) -> np.ndarray:
        return np.array([self.probs.get(v, 0.0) for v in ids])


def estimate_histogram(
    window: Iterable[str], ids: Sequence[str], window_size: int = DEFAULT_WINDOW
) -> AffinityHistogram:
    """Normalised counts of the last ``window_size`` predictions.

    An empty window yields the uniform histogram with ``fallback`` set.
    """
    recent = list(window)[-window_size:] if window_size else list(window)
    if not recent:
        return AffinityHistogram({v: 1.0 / len(ids) for v in ids}, 0, fallback=True)
    index = {v: i for i, v in enumerate(ids)}
    counts = np.zeros(len(ids))
    for v in recent:
        counts[index[v]] += 1
    probs = counts / counts.sum()
    return AffinityHistogram(dict(zip(ids, probs.tolist())), len(recent))


@dataclass
class HistogramWindow:
    """Single-writer ring buffer of predicted level indices with O(1) updates."""

    ids: tuple[str, ...]
    size: int = DEFAULT_WINDOW
    _buf: deque = field(init=False, repr=False)
    _counts: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self._buf = deque(maxlen=self.size)
        self._counts = np.zeros(len(self.ids), dtype=np.int64)

    def push(self, level: int) -> None:
        if len(self._buf) == self.size:
            self._counts[self._buf[0]] -= 1
        self._buf.append(level)
        self._counts[level] += 1

    def __len__(self) -> int:
        return len(self._buf)

    def snapshot(self) -> AffinityHistogram:
        n = len(self._buf)
        if n == 0:
            return AffinityHistogram({v: 1.0 / len(self.ids) for v in self.ids}, 0, fallback=True)
        return AffinityHistogram(dict(zip(self.ids, (self._counts / n).tolist())), n)


def l2_error(estimate: AffinityHistogram, target: Mapping[str, float]) -> float:
    ids = sorted(set(estimate.probs) | set(target))
    a = np.array([estimate.probs.get(v, 0.0) for v in ids])
    b = np.array([target.get(v, 0.0) for v in ids])
    return float(np.linalg.norm(a - b))
