"""Distribution aligner: from predicted affinity H to allocated load F.

:func:`compute_pasm` walks the levels from fastest to slowest. A level with
more predicted prompts than allocated load pushes the excess one level
slower (free); a level with spare load pulls prompts from the nearest slower
levels (a degradation). Per-step fractions are composed into a full
transition matrix by tracking where each source level's unit mass ends up.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .catalog import Catalog, Strategy

logger = logging.getLogger(__name__)

CLAMP = 1e-12


class PasmError(ValueError):
    pass


@dataclass(frozen=True)
class Pasm:
    """Row-stochastic shift map; ``matrix[i, j] = P(level j | predicted i)``."""

    ids: tuple[str, ...]
    matrix: np.ndarray
    epoch: int = 0
    faster_fallback: bool = False
    _cdf: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        cdf = np.cumsum(self.matrix, axis=1)
        cdf[:, -1] = 1.0
        object.__setattr__(self, "_cdf", cdf)

    @classmethod
    def identity(cls, ids: Sequence[str], epoch: int = 0) -> "Pasm":
        return cls(tuple(ids), np.eye(len(ids)), epoch)

    def index(self, variant_id: str) -> int:
        try:
            return self.ids.index(variant_id)
        except ValueError:
            raise PasmError(f"no PASM row for {variant_id!r}") from None

    def row(self, variant_id: str) -> dict[str, float]:
        r = self.matrix[self.index(variant_id)]
        return {v: float(p) for v, p in zip(self.ids, r) if p > 0}

    def sample_level(self, source: int, u: float) -> int:
        return int(np.searchsorted(self._cdf[source], u, side="right"))

    def dump(self, fh) -> None:
        fh.write(f"# epoch {self.epoch}\n")
        fh.write("from\\to\t" + "\t".join(self.ids) + "\n")
        for v, r in zip(self.ids, self.matrix):
            fh.write(v + "\t" + "\t".join(f"{p:.9f}" for p in r) + "\n")


def _as_vector(dist, ids: Sequence[str]) -> np.ndarray:
    if isinstance(dist, Mapping):
        return np.array([float(dist.get(v, 0.0)) for v in ids])
    if hasattr(dist, "probs"):
        return np.array([float(dist.probs.get(v, 0.0)) for v in ids])
    if hasattr(dist, "f_dist"):
        return np.array([float(dist.f_dist.get(v, 0.0)) for v in ids])
    return np.asarray(dist, dtype=float)


def _move(t: np.ndarray, src: int, dst: int, frac: float) -> None:
    moved = t[:, src] * frac
    t[:, dst] += moved
    t[:, src] -= moved
    t[np.abs(t) < CLAMP] = 0.0


def compute_pasm(h, f, ids: Sequence[str] | None = None, epoch: int = 0) -> Pasm:
    """Shift map from ``h`` (predicted optima) to ``f`` (allocated load).

    ``h`` and ``f`` are distributions over the same levels ordered slow
    (index 0) to fast; mappings and histogram/plan objects are accepted when
    ``ids`` gives the order.
    """
    if ids is None:
        if isinstance(h, Mapping) or hasattr(h, "probs"):
            raise PasmError("ids required when h is a mapping")
        ids = [str(i) for i in range(len(h))]
    ids = tuple(ids)
    h = _as_vector(h, ids)
    f = _as_vector(f, ids)
    n = len(ids)
    if h.shape != (n,) or f.shape != (n,):
        raise PasmError("h and f must have one entry per level")
    if np.any(h < -CLAMP) or np.any(f < -CLAMP):
        raise PasmError("h and f must be non-negative")
    if abs(f.sum() - 1.0) > 1e-6:
        raise PasmError(f"f must sum to 1, got {f.sum()!r}")
    if abs(h.sum() - 1.0) > 1e-6:
        raise PasmError(f"h must sum to 1, got {h.sum()!r}")
    h = np.clip(h, 0, None)
    f = np.clip(f, 0, None)
    if abs(h.sum() - f.sum()) > CLAMP:
        logger.debug("renormalising h and f to unit mass")
    h = h / h.sum()
    f = f / f.sum()

    t = np.eye(n)
    cur = h.copy()
    fallback = False
    for i in range(n - 1, -1, -1):
        if cur[i] > f[i] + CLAMP:
            if i == 0:
                break
            excess = cur[i] - f[i]
            _move(t, i, i - 1, excess / cur[i])
            cur[i - 1] += excess
            cur[i] = f[i]
            continue
        if f[i] <= CLAMP:
            # Nothing allocated here: zero-mass tracers move on as well.
            if i > 0:
                _move(t, i, i - 1, 1.0)
                cur[i - 1] += cur[i]
                cur[i] = 0.0
            continue
        m = 1
        while cur[i] < f[i] - CLAMP and i - m >= 0:
            src = i - m
            if cur[src] > CLAMP:
                shift = min(cur[src], f[i] - cur[i])
                _move(t, src, i, shift / cur[src])
                cur[src] -= shift
                cur[i] += shift
            m += 1
        if cur[i] < f[i] - 1e-9:
            # Only reachable when mass does not balance; pull from faster levels.
            fallback = True
            for src in range(i + 1, n):
                spare = cur[src] - f[src]
                if spare > CLAMP:
                    shift = min(spare, f[i] - cur[i])
                    _move(t, src, i, shift / cur[src])
                    cur[src] -= shift
                    cur[i] += shift

    _park_unallocated(t, f)
    t[t < CLAMP] = 0.0
    t /= t.sum(axis=1, keepdims=True)
    return Pasm(ids, t, epoch, fallback)


def _park_unallocated(t: np.ndarray, f: np.ndarray) -> None:
    """Move any row mass on zero-load levels to the nearest loaded level.

    Only rows of sources with no predicted mass can end up there; their
    routing should still land on a level that has workers.
    """
    loaded = np.flatnonzero(f > CLAMP)
    if len(loaded) == 0:
        return
    for j in np.flatnonzero(f <= CLAMP):
        col = t[:, j].copy()
        if not col.any():
            continue
        slower = loaded[loaded < j]
        dst = slower[-1] if len(slower) else loaded[loaded > j][0]
        t[:, dst] += col
        t[:, j] = 0.0


def expected_degradation(pasm: Pasm, h, d_table: np.ndarray, faster: np.ndarray | None = None) -> float:
    """Expected quality loss of routing ``h`` through ``pasm``.

    ``d_table[j, i]`` is the loss when a prompt optimal at level ``i`` is
    served at level ``j``. Only faster targets count; ``faster[j, i]``
    overrides the default ``j > i`` test (for example a throughput test).
    """
    hv = _as_vector(h, pasm.ids)
    n = len(pasm.ids)
    if faster is None:
        faster = np.triu(np.ones((n, n), dtype=bool), k=1).T
    w = pasm.matrix * hv[:, None]  # w[i, j] = H_i P(j | i)
    return float(np.sum(w.T * d_table * faster))


def faster_mask(catalog: Catalog, strategy: Strategy) -> np.ndarray:
    """``mask[j, i]`` true when level ``j`` out-throughputs level ``i``."""
    pth = np.array([v.peak_throughput_qpm for v in catalog.variants(strategy)])
    return pth[:, None] > pth[None, :]


MAX_ORACLE_LEVELS = 8


def to_grid(x: np.ndarray, denominator: int) -> np.ndarray:
    scaled = np.asarray(x, dtype=float) * denominator
    ints = np.rint(scaled).astype(np.int64)
    if np.any(np.abs(scaled - ints) > 1e-6):
        raise PasmError(f"distribution is not on the 1/{denominator} grid")
    return ints


def min_degradation_oracle(h, f, d_table: np.ndarray, denominator: int = 1000, faster: np.ndarray | None = None):
    """Exact minimum-loss transport from ``h`` to ``f``.

    Moving mass to a slower (or equal) level is free; moving it faster costs
    ``d_table[dst, src]``. Supplies are integers on the ``1/denominator``
    grid, so the simplex vertex returned is an integral flow; the flow is
    rounded, checked, and the cost re-evaluated exactly.

    Returns ``(plan, cost)`` with ``plan[i, j]`` the mass moved from ``i``
    to ``j``.
    """
    from scipy.optimize import linprog

    h = np.asarray(h, dtype=float)
    f = np.asarray(f, dtype=float)
    n = len(h)
    if n > MAX_ORACLE_LEVELS:
        raise PasmError(f"oracle limited to {MAX_ORACLE_LEVELS} levels")
    if denominator > 1000:
        raise PasmError("denominator must be <= 1000")
    hi, fi = to_grid(h, denominator), to_grid(f, denominator)
    if hi.sum() != fi.sum():
        raise PasmError("h and f carry different total mass")
    if faster is None:
        faster = np.triu(np.ones((n, n), dtype=bool), k=1).T
    # cost[i, j] for moving from source i to destination j.
    cost = np.where(faster, d_table, 0.0).T
    a_eq = np.zeros((2 * n, n * n))
    for i in range(n):
        a_eq[i, i * n:(i + 1) * n] = 1
        a_eq[n + i, i::n] = 1
    b_eq = np.concatenate([hi, fi]).astype(float)
    res = linprog(cost.ravel(), A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs-ds")
    if res.status != 0:
        raise PasmError(f"transport LP failed: {res.message}")
    flow = np.rint(res.x).astype(np.int64).reshape(n, n)
    if not (np.array_equal(flow.sum(axis=1), hi) and np.array_equal(flow.sum(axis=0), fi)) or flow.min() < 0:
        raise PasmError("transport LP returned a non-integral vertex")
    total = float(np.sum(flow * cost)) / denominator
    return flow / denominator, total


def route_sample(pasm: Pasm, predicted: str, rng: np.random.Generator) -> str:
    """Draw the serving variant for a prompt predicted optimal at ``predicted``."""
    i = pasm.index(predicted)
    return pasm.ids[pasm.sample_level(i, rng.random())]


def pushforward(pasm: Pasm, h) -> np.ndarray:
    return _as_vector(h, pasm.ids) @ pasm.matrix
