"""Oracle equivalence suites: allocator vs brute force, shift map vs transport
LP, worker selection vs exhaustive argmin."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .allocator import brute_force_allocation, solve_allocation
from .catalog import Catalog, Strategy, build_catalog, default_config, effective_latency
from .oda import compute_pasm, expected_degradation, min_degradation_oracle, pushforward
from .scheduler import WorkerState, select_worker

SUITES = ("ilp", "oda", "eq3")


@dataclass
class SuiteResult:
    name: str
    cases: int
    failures: int
    counterexample: str | None
    seconds: float

    @property
    def ok(self) -> bool:
        return self.failures == 0

    def line(self) -> str:
        status = "PASS" if self.ok else "FAIL"
        return f"{status} {self.name}: {self.cases - self.failures}/{self.cases} cases agree ({self.seconds:.1f} s)"


def sm_prefix_catalog(k: int) -> Catalog:
    """Default catalog with the SM side cut to its ``k`` slowest variants."""
    cfg = default_config()
    sm = [v for v in cfg.variants if v.strategy is Strategy.SM][:k]
    ac = [v for v in cfg.variants if v.strategy is Strategy.AC]
    return build_catalog(type(cfg)(tuple(ac + sm), cfg.n_steps, cfg.delta, cfg.retrieval_overhead_s))


def ilp_suite(max_workers: int = 4, variant_counts=(2, 3, 4), max_w: int = 60, solver=solve_allocation) -> SuiteResult:
    t0 = time.perf_counter()
    cases = failures = 0
    first = None
    for k in variant_counts:
        cat = sm_prefix_catalog(k)
        for n in range(1, max_workers + 1):
            for w in range(max_w + 1):
                cases += 1
                got = solver(w, cat, n, Strategy.SM)
                want = brute_force_allocation(w, cat, n, Strategy.SM)
                if abs(got.objective - want.objective) > 1e-9 or got.feasible != want.feasible:
                    failures += 1
                    if first is None:
                        first = (f"variants={k} workers={n} W_t={w}: solver {got.objective:.9f} "
                                 f"(feasible={got.feasible}) vs brute force {want.objective:.9f} "
                                 f"(feasible={want.feasible})")
    return SuiteResult("ilp", cases, failures, first, time.perf_counter() - t0)


def grid_distribution(rng: np.random.Generator, n: int, denominator: int = 1000, p_zero: float = 0.2) -> np.ndarray:
    """Random distribution on the ``1/denominator`` grid, some entries zero."""
    w = rng.dirichlet(np.ones(n))
    w[rng.random(n) < p_zero] = 0.0
    if w.sum() == 0:
        w[rng.integers(n)] = 1.0
    w /= w.sum()
    scaled = w * denominator
    ints = np.floor(scaled).astype(int)
    short = denominator - ints.sum()
    order = np.argsort(-(scaled - ints), kind="stable")
    ints[order[:short]] += 1
    return ints / denominator


def superlinear_table(rng: np.random.Generator, n: int) -> np.ndarray:
    """Quality per level (descending) and the gap-squared degradation table."""
    q = np.sort(rng.uniform(15.0, 21.0, n))[::-1]
    idx = np.arange(n)
    gap = idx[:, None] - idx[None, :]
    return np.where(gap > 0, gap.astype(float) ** 2 * (q[None, :] - q[:, None]), 0.0)


def oda_suite(validity_cases: int = 10_000, optimality_cases: int = 1_000, seed: int = 0,
              pasm_fn: Callable = compute_pasm) -> SuiteResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    failures = 0
    first = None
    for c in range(validity_cases):
        n = int(rng.integers(2, 9))
        h, f = rng.dirichlet(np.ones(n)), rng.dirichlet(np.ones(n))
        h[rng.random(n) < 0.2] = 0.0
        h = h / h.sum() if h.sum() > 0 else np.eye(n)[0]
        p = pasm_fn(h, f)
        row_err = float(np.max(np.abs(p.matrix.sum(axis=1) - 1.0)))
        push_err = float(np.max(np.abs(pushforward(p, h) - f)))
        if row_err >= 1e-9 or push_err >= 1e-9 or p.matrix.min() < 0:
            failures += 1
            if first is None:
                first = f"validity case {c}: H={h.tolist()} F={f.tolist()} row error {row_err:.3g} pushforward error {push_err:.3g}"
    for c in range(optimality_cases):
        n = int(rng.integers(2, 9))
        h, f = grid_distribution(rng, n), grid_distribution(rng, n)
        d = superlinear_table(rng, n)
        p = pasm_fn(h, f)
        got = expected_degradation(p, h, d)
        _, best = min_degradation_oracle(h, f, d)
        push_err = float(np.max(np.abs(pushforward(p, h) - f)))
        if got - best > 1e-9 or push_err >= 1e-9:
            failures += 1
            if first is None:
                first = (f"optimality case {c}: H={h.tolist()} F={f.tolist()} shift map loss {got:.9f} "
                         f"vs transport optimum {best:.9f}")
    return SuiteResult("oda", validity_cases + optimality_cases, failures, first, time.perf_counter() - t0)


def argmin_oracle(workers, variant: str, catalog: Catalog):
    """Exhaustive argmin of queue length times latency, lowest id on ties."""
    t = effective_latency(catalog, variant)
    rows = [(w.queue_len * t, w.id) for w in workers if w.serving and w.active_variant == variant]
    return min(rows)[1] if rows else None


def random_workers(rng: np.random.Generator, catalog: Catalog, strategy: Strategy, n: int) -> list[WorkerState]:
    ids = catalog.ids(strategy)
    out = []
    for i in rng.permutation(n):
        w = WorkerState(int(i), active_variant=ids[int(rng.integers(len(ids)))])
        w.queue.extend(range(int(rng.integers(0, 6))))
        if rng.random() < 0.5:
            w.in_service = object()
        w.alive = bool(rng.random() > 0.1)
        if rng.random() < 0.1:
            w.loading = (w.active_variant, 0.0, True)
        out.append(w)
    return out


def eq3_suite(cases: int = 10_000, seed: int = 0, selector: Callable = select_worker) -> SuiteResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    catalog = build_catalog()
    failures = 0
    first = None
    for c in range(cases):
        strategy = catalog.strategies[int(rng.integers(2))]
        workers = random_workers(rng, catalog, strategy, int(rng.integers(1, 13)))
        ids = catalog.ids(strategy)
        v = ids[int(rng.integers(len(ids)))]
        got, want = selector(workers, v, catalog), argmin_oracle(workers, v, catalog)
        if got != want:
            failures += 1
            if first is None:
                state = [(w.id, w.active_variant, w.queue_len, w.serving) for w in workers]
                first = f"case {c}: variant {v} workers {state}: selected {got}, argmin {want}"
    return SuiteResult("eq3", cases, failures, first, time.perf_counter() - t0)


def run_suites(names=SUITES) -> list[SuiteResult]:
    table = {"ilp": ilp_suite, "oda": oda_suite, "eq3": eq3_suite}
    unknown = [n for n in names if n not in table]
    if unknown:
        raise ValueError(f"unknown suites {unknown}; choose from {', '.join(SUITES)}")
    return [table[n]() for n in names]
