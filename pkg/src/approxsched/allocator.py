"""Worker-to-variant allocation that maximises load-weighted quality.

Workers are homogeneous, so a plan is determined by how many workers run
each variant. :func:`solve_allocation` enumerates those counts and fills
load slowest-first; :func:`brute_force_allocation` searches every per-worker
assignment and integer load split and serves as its test oracle.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .catalog import Catalog, Strategy, Variant

TIE_EPS = 1e-12


@dataclass(frozen=True)
class WorkloadEstimate:
    w_t_qpm: float

    def __post_init__(self):
        if self.w_t_qpm < 0:
            raise ValueError("workload must be non-negative")

    @property
    def target(self) -> int:
        # Integer QPM target; fractional estimates round up.
        return int(math.ceil(self.w_t_qpm - 1e-9))


@dataclass(frozen=True)
class AllocationPlan:
    assignment: Mapping[int, str]
    loads: Mapping[int, int]
    f_dist: Mapping[str, float]
    objective: float
    w_t: int
    feasible: bool = True

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for v in self.assignment.values():
            out[v] = out.get(v, 0) + 1
        return out

    def f_vector(self, ids: Sequence[str]) -> np.ndarray:
        return np.array([self.f_dist.get(v, 0.0) for v in ids])


class AllocationError(ValueError):
    pass


def estimate_workload(
    arrival_times: Sequence[float] | np.ndarray,
    now: float,
    horizon_s: float = 60.0,
    alpha: float | None = None,
    previous: float | None = None,
) -> WorkloadEstimate:
    """Arrivals in ``(now - horizon_s, now]`` scaled to QPM.

    With ``alpha`` set, the count is exponentially smoothed against
    ``previous``: ``alpha * current + (1 - alpha) * previous``.
    """
    times = np.asarray(arrival_times, dtype=float)
    n = int(np.count_nonzero((times > now - horizon_s) & (times <= now)))
    qpm = n * 60.0 / horizon_s
    if alpha is not None and previous is not None:
        qpm = alpha * qpm + (1 - alpha) * previous
    return WorkloadEstimate(qpm)


def smooth(series: Sequence[float], alpha: float) -> float:
    """Exponential smoothing seeded with the first value."""
    it = iter(series)
    try:
        s = float(next(it))
    except StopIteration:
        return 0.0
    for x in it:
        s = alpha * x + (1 - alpha) * s
    return s


def _plan_key(objective: float, assignment: Sequence[str]):
    # Higher objective, then fewer distinct variants, then lexicographic ids.
    return (-objective, len(set(assignment)), tuple(sorted(assignment)))


def _better(a, b) -> bool:
    if abs(a[0] - b[0]) > TIE_EPS:
        return a[0] < b[0]
    return a[1:] < b[1:]


def _finish(variants: Sequence[Variant], per_worker: Sequence[int], loads: Sequence[int], w: int, feasible: bool) -> AllocationPlan:
    assignment = {i: variants[j].id for i, j in enumerate(per_worker)}
    load_map = {i: int(y) for i, y in enumerate(loads)}
    total = sum(load_map.values())
    f: dict[str, float] = {}
    if total > 0:
        for i, y in load_map.items():
            f[assignment[i]] = f.get(assignment[i], 0.0) + y / total
    else:
        n = len(assignment)
        for v in assignment.values():
            f[v] = f.get(v, 0.0) + 1.0 / n
    objective = sum(variants_by_id(variants)[v].avg_quality * p for v, p in f.items())
    return AllocationPlan(assignment, load_map, f, objective, w, feasible)


def variants_by_id(variants: Sequence[Variant]) -> dict[str, Variant]:
    return {v.id: v for v in variants}


def _saturated(variants: Sequence[Variant], n_workers: int, w: int) -> AllocationPlan:
    fastest = len(variants) - 1
    cap = variants[fastest].peak_throughput_qpm
    return _finish(variants, [fastest] * n_workers, [cap] * n_workers, w, feasible=False)


def _compositions(n: int, k: int):
    """All tuples of ``k`` non-negative ints summing to ``n``."""
    for bars in itertools.combinations(range(n + k - 1), k - 1):
        prev = -1
        out = []
        for b in bars:
            out.append(b - prev - 1)
            prev = b
        out.append(n + k - 1 - prev - 1)
        yield tuple(out)


def _waterfill(variants: Sequence[Variant], counts: Sequence[int], w: int):
    """Per-worker (variant index, load), slowest variants filled first."""
    per_worker, loads = [], []
    remaining = w
    for j, c in enumerate(counts):
        cap = variants[j].peak_throughput_qpm
        for _ in range(c):
            y = min(cap, remaining)
            per_worker.append(j)
            loads.append(y)
            remaining -= y
    return per_worker, loads, remaining


def solve_allocation(
    w_t: WorkloadEstimate | float,
    catalog: Catalog,
    n_workers: int,
    strategy: Strategy = Strategy.AC,
    worker_ids: Sequence[int] | None = None,
) -> AllocationPlan:
    """Exact optimum over variant-count compositions.

    ``worker_ids`` relabels the plan's workers (for instance to the alive
    ones); by default workers are ``0 .. n_workers - 1``.
    """
    if not isinstance(w_t, WorkloadEstimate):
        w_t = WorkloadEstimate(float(w_t))
    if n_workers < 1:
        raise AllocationError("need at least one worker")
    variants = catalog.variants(strategy) if strategy in catalog.variants_by_strategy else ()
    if not variants:
        raise AllocationError("catalog has no variants for the strategy")
    w = w_t.target
    if w > n_workers * variants[-1].peak_throughput_qpm:
        plan = _saturated(variants, n_workers, w)
        return _relabel(plan, worker_ids)

    best_key, best = None, None
    for counts in _compositions(n_workers, len(variants)):
        cap = sum(c * v.peak_throughput_qpm for c, v in zip(counts, variants))
        if cap < w:
            continue
        per_worker, loads, _ = _waterfill(variants, counts, w)
        objective = (
            sum(variants[j].avg_quality * y for j, y in zip(per_worker, loads)) / w
            if w > 0
            else sum(variants[j].avg_quality for j in per_worker) / n_workers
        )
        key = _plan_key(objective, [variants[j].id for j in per_worker])
        if best_key is None or _better(key, best_key):
            best_key, best = key, (per_worker, loads)
    plan = _finish(variants, best[0], best[1], w, feasible=True)
    return _relabel(plan, worker_ids)


def _relabel(plan: AllocationPlan, worker_ids: Sequence[int] | None) -> AllocationPlan:
    if worker_ids is None:
        return plan
    worker_ids = list(worker_ids)
    if len(worker_ids) != len(plan.assignment):
        raise AllocationError("worker_ids length does not match n_workers")
    return AllocationPlan(
        {worker_ids[i]: v for i, v in plan.assignment.items()},
        {worker_ids[i]: y for i, y in plan.loads.items()},
        plan.f_dist,
        plan.objective,
        plan.w_t,
        plan.feasible,
    )


MAX_BRUTE_WORKERS = 4
MAX_BRUTE_VARIANTS = 4


def brute_force_allocation(
    w_t: WorkloadEstimate | float, catalog: Catalog, n_workers: int, strategy: Strategy = Strategy.AC
) -> AllocationPlan:
    """Exhaustive search over per-worker assignments and integer loads."""
    if not isinstance(w_t, WorkloadEstimate):
        w_t = WorkloadEstimate(float(w_t))
    variants = catalog.variants(strategy)
    if n_workers > MAX_BRUTE_WORKERS or len(variants) > MAX_BRUTE_VARIANTS:
        raise AllocationError(
            f"brute force limited to {MAX_BRUTE_WORKERS} workers and {MAX_BRUTE_VARIANTS} variants"
        )
    if n_workers < 1:
        raise AllocationError("need at least one worker")
    w = w_t.target
    quality = np.array([v.avg_quality for v in variants])
    caps = np.array([v.peak_throughput_qpm for v in variants])

    # Every integer load vector with sum w and entries in [0, min(w, max cap)].
    top = min(w, int(caps.max()))
    if n_workers == 1:
        grid = np.array([[w]]) if w <= top else np.empty((0, 1), dtype=int)
    else:
        axes = np.meshgrid(*([np.arange(top + 1)] * (n_workers - 1)), indexing="ij")
        head = np.stack([a.ravel() for a in axes], axis=1)
        last = w - head.sum(axis=1)
        ok = (last >= 0) & (last <= top)
        grid = np.hstack([head[ok], last[ok, None]])

    best_key, best = None, None
    for assign in itertools.product(range(len(variants)), repeat=n_workers):
        a = np.array(assign)
        feasible = np.all(grid <= caps[a], axis=1)
        if not feasible.any():
            continue
        rows = grid[feasible]
        if w > 0:
            values = rows @ quality[a] / w
        else:
            values = np.full(len(rows), quality[a].mean())
        r = int(np.argmax(values))
        key = _plan_key(float(values[r]), [variants[j].id for j in assign])
        if best_key is None or _better(key, best_key):
            best_key, best = key, (list(assign), rows[r].tolist())
    if best is None:
        return _saturated(variants, n_workers, w)
    return _finish(variants, best[0], best[1], w, feasible=True)


def continuous_relaxation(w_t: float, catalog: Catalog, n_workers: int, strategy: Strategy = Strategy.AC) -> float:
    """LP upper bound on the objective with fractional loads and assignments."""
    from scipy.optimize import linprog

    variants = catalog.variants(strategy)
    if w_t <= 0:
        return variants[0].avg_quality
    q = np.array([v.avg_quality for v in variants])
    caps = np.array([v.peak_throughput_qpm for v in variants], dtype=float)
    k = len(variants)
    # Variables: load per variant (k), workers per variant (k).
    c = np.concatenate([-q / w_t, np.zeros(k)])
    a_ub = np.hstack([np.eye(k), -np.diag(caps)])
    a_eq = np.vstack([np.concatenate([np.ones(k), np.zeros(k)]), np.concatenate([np.zeros(k), np.ones(k)])])
    res = linprog(c, A_ub=a_ub, b_ub=np.zeros(k), A_eq=a_eq, b_eq=[w_t, n_workers], bounds=(0, None), method="highs")
    if res.status != 0:
        return float("nan")
    return float(-res.fun)
