"""Online control plane: per-prompt routing, periodic re-solve, strategy switch.

Routing is predicted optimum -> shift-map sample -> least-work worker. Every
resolve interval the allocation and shift map are recomputed from the last
minute of arrivals and the look-back histogram. Strategy switching between
approximate caching and smaller models is a four-state machine driven by
retrieval-latency samples, background probes, and model-load completions.
"""

from __future__ import annotations

import dataclasses
import enum
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .affinity import DEFAULT_WINDOW, HistogramWindow
from .allocator import AllocationPlan, WorkloadEstimate, estimate_workload, solve_allocation
from .catalog import Catalog, Strategy, effective_latency
from .oda import Pasm, compute_pasm

logger = logging.getLogger(__name__)


class Mode(str, enum.Enum):
    AC = "AC"
    SM = "SM"
    SWITCHING_TO_SM = "SWITCHING_TO_SM"
    SWITCHING_TO_AC = "SWITCHING_TO_AC"


def serving_strategy(mode: Mode) -> Strategy:
    """Strategy whose variants are served in ``mode``.

    While switching back to caching the small models keep serving until the
    large models are resident everywhere.
    """
    return Strategy.AC if mode is Mode.AC else Strategy.SM


@dataclass
class Job:
    prompt: int
    arrival_s: float
    variant: str | None = None  # per-prompt override; None serves the worker's variant


@dataclass
class WorkerState:
    id: int
    active_variant: str | None = None
    loaded_variants: set = field(default_factory=set)
    queue: deque = field(default_factory=deque)
    in_service: Job | None = None
    busy_until_s: float = 0.0
    alive: bool = True
    # (variant, done_at_s, blocking)
    loading: tuple[str, float, bool] | None = None
    generation: int = 0

    @property
    def queue_len(self) -> int:
        return len(self.queue) + (self.in_service is not None)

    @property
    def serving(self) -> bool:
        return self.alive and self.active_variant is not None and not (self.loading and self.loading[2])


@dataclass(frozen=True)
class SwitchConfig:
    alpha: float = 0.3
    threshold_factor: float = 5.0
    persistence: int = 3
    probe_interval_s: float = 30.0
    margin: float = 1.5
    monitor_interval_s: float = 5.0


@dataclass(frozen=True)
class SwitchState:
    mode: Mode
    retrieval_ema_s: float
    threshold_s: float
    nominal_s: float
    probe_interval_s: float = 30.0
    margin: float = 1.5
    alpha: float = 0.3
    persistence: int = 3
    consecutive: int = 0
    changed_at_s: float = 0.0

    def __post_init__(self):
        if self.margin < 1:
            raise ValueError("margin must be >= 1")
        if self.threshold_s <= self.nominal_s:
            raise ValueError("threshold must exceed the nominal retrieval overhead")

    @classmethod
    def initial(cls, catalog: Catalog, cfg: SwitchConfig = SwitchConfig(), mode: Mode = Mode.AC) -> "SwitchState":
        nominal = catalog.retrieval_overhead_s
        threshold = cfg.threshold_factor * nominal if nominal > 0 else cfg.threshold_factor * 1e-3
        return cls(mode, nominal, threshold, nominal, cfg.probe_interval_s, cfg.margin, cfg.alpha, cfg.persistence)


def update_switch(
    state: SwitchState,
    now: float,
    retrieval_sample_s: float | None = None,
    probe_sample_s: float | None = None,
    small_model_ready: bool = False,
    large_models_ready: bool = False,
) -> SwitchState:
    """Advance the strategy-switch state machine by one observation.

    * AC: each retrieval sample updates the EMA; once the EMA and the last
      ``persistence`` raw samples all exceed the threshold, start switching
      to small models.
    * SWITCHING_TO_SM: the first small model finishing its load completes
      the switch.
    * SM: a probe at or below the threshold starts switching back.
    * SWITCHING_TO_AC: done once every worker holds the large model.
    """
    mode = state.mode
    if mode is Mode.AC and retrieval_sample_s is not None:
        ema = state.alpha * retrieval_sample_s + (1 - state.alpha) * state.retrieval_ema_s
        consecutive = state.consecutive + 1 if retrieval_sample_s > state.threshold_s else 0
        if ema > state.threshold_s and consecutive >= state.persistence:
            return dataclasses.replace(
                state, mode=Mode.SWITCHING_TO_SM, retrieval_ema_s=ema, consecutive=consecutive, changed_at_s=now
            )
        return dataclasses.replace(state, retrieval_ema_s=ema, consecutive=consecutive)
    if mode is Mode.SWITCHING_TO_SM and small_model_ready:
        return dataclasses.replace(state, mode=Mode.SM, changed_at_s=now)
    if mode is Mode.SM and probe_sample_s is not None and probe_sample_s <= state.threshold_s:
        return dataclasses.replace(state, mode=Mode.SWITCHING_TO_AC, changed_at_s=now)
    if mode is Mode.SWITCHING_TO_AC and large_models_ready:
        return dataclasses.replace(
            state, mode=Mode.AC, retrieval_ema_s=state.nominal_s, consecutive=0, changed_at_s=now
        )
    return state


def select_worker(workers: Iterable[WorkerState], variant: str, catalog: Catalog) -> int | None:
    """Worker minimising queued requests times per-request latency.

    Only alive, non-loading workers whose active variant is ``variant`` are
    eligible; ties go to the lowest id. Returns ``None`` if none qualifies.
    """
    t_proc = effective_latency(catalog, variant)
    best_id, best_cost = None, None
    for w in workers:
        if not w.serving or w.active_variant != variant:
            continue
        cost = w.queue_len * t_proc
        if best_cost is None or cost < best_cost or (cost == best_cost and w.id < best_id):
            best_id, best_cost = w.id, cost
    return best_id


def fallback_order(catalog: Catalog, variant: str, slower_first: bool = True) -> list[str]:
    """Other variants of the same strategy, nearest first, slower side first."""
    v = catalog[variant]
    ids = catalog.ids(v.strategy)
    slower = [ids[i] for i in range(v.level_index - 1, -1, -1)]
    faster = [ids[i] for i in range(v.level_index + 1, len(ids))]
    return slower + faster if slower_first else faster + slower


def place(
    workers: Sequence[WorkerState], variant: str, catalog: Catalog, slower_first: bool = True
) -> tuple[int, str] | None:
    """``select_worker`` with the nearest-hosted-variant fallback."""
    wid = select_worker(workers, variant, catalog)
    if wid is not None:
        return wid, variant
    for alt in fallback_order(catalog, variant, slower_first):
        wid = select_worker(workers, alt, catalog)
        if wid is not None:
            logger.debug("variant %s not hosted, falling back to %s", variant, alt)
            return wid, alt
    # Nothing of this strategy is up (mid-switch); take any serving worker.
    best = None
    for w in workers:
        if w.serving:
            cost = w.queue_len * effective_latency(catalog, w.active_variant)
            if best is None or cost < best[0]:
                best = (cost, w.id, w.active_variant)
    return None if best is None else (best[1], best[2])


def schedule_prompt(
    job: Job,
    predicted: str,
    pasm: Pasm,
    workers: Sequence[WorkerState],
    catalog: Catalog,
    rng: np.random.Generator,
    slower_first: bool = True,
) -> tuple[int, str] | None:
    """Route one prompt and enqueue it; ``None`` when no worker is alive."""
    assigned = pasm.ids[pasm.sample_level(pasm.index(predicted), rng.random())]
    placed = place(workers, assigned, catalog, slower_first)
    if placed is not None:
        workers[placed[0]].queue.append(job)
    return placed


def churn_matching(plan: AllocationPlan, workers: Sequence[WorkerState]) -> AllocationPlan:
    """Reassign plan variants to workers, keeping current variants where possible.

    Workers already running (or loading) a variant the plan still needs keep
    it; the remaining variants go to the remaining workers in id order. Loads
    follow their variant.
    """
    by_variant: dict[str, list[int]] = {}
    for wid in sorted(plan.assignment):
        by_variant.setdefault(plan.assignment[wid], []).append(plan.loads[wid])
    remaining = {v: len(ls) for v, ls in by_variant.items()}
    eligible = sorted(plan.assignment)
    current = {
        w.id: (w.loading[0] if w.loading else w.active_variant) for w in workers if w.id in plan.assignment
    }
    assignment: dict[int, str] = {}
    free: list[int] = []
    for wid in eligible:
        v = current.get(wid)
        if v is not None and remaining.get(v, 0) > 0:
            assignment[wid] = v
            remaining[v] -= 1
        else:
            free.append(wid)
    order = [v for v in by_variant]  # plan order is slow to fast
    for v in order:
        while remaining[v] > 0:
            assignment[free.pop(0)] = v
            remaining[v] -= 1
    cursor = {v: 0 for v in by_variant}
    loads: dict[int, int] = {}
    for wid in sorted(assignment):
        v = assignment[wid]
        loads[wid] = by_variant[v][cursor[v]]
        cursor[v] += 1
    return dataclasses.replace(plan, assignment=assignment, loads=loads)


@dataclass(frozen=True)
class SchedulerConfig:
    resolve_interval_s: float = 60.0
    window_size: int = DEFAULT_WINDOW
    workload_horizon_s: float = 60.0
    workload_alpha: float | None = None
    slower_first: bool = True
    enable_switching: bool = True
    switch: SwitchConfig = SwitchConfig()


@dataclass
class ResolveResult:
    plan: AllocationPlan
    pasm: Pasm
    # (worker id, variant, load seconds); zero seconds means an instant re-key.
    changes: list[tuple[int, str, float]]
    w_t: WorkloadEstimate


class ControlPlane:
    """Mutable scheduler state shared by the simulator and the API helpers."""

    def __init__(self, catalog: Catalog, n_workers: int, config: SchedulerConfig = SchedulerConfig(), mode: Mode = Mode.AC):
        self.catalog = catalog
        self.config = config
        self.workers = [WorkerState(i) for i in range(n_workers)]
        self.switch = SwitchState.initial(catalog, config.switch, mode)
        self.windows = {s: HistogramWindow(catalog.ids(s), config.window_size) for s in catalog.strategies}
        self.recent_arrivals: deque = deque()
        self.epoch = 0
        self.last_w: float | None = None
        strategy = serving_strategy(mode)
        ids = catalog.ids(strategy)
        self.pasm = Pasm.identity(ids)
        self.plan: AllocationPlan | None = None

    @property
    def strategy(self) -> Strategy:
        return serving_strategy(self.switch.mode)

    def observe_arrival(self, now: float, predicted_level: int | None) -> None:
        self.recent_arrivals.append(now)
        if predicted_level is not None:
            self.windows[self.strategy].push(predicted_level)

    def workload(self, now: float) -> WorkloadEstimate:
        horizon = self.config.workload_horizon_s
        while self.recent_arrivals and self.recent_arrivals[0] <= now - horizon:
            self.recent_arrivals.popleft()
        est = estimate_workload(self.recent_arrivals, now, horizon, self.config.workload_alpha, self.last_w)
        self.last_w = est.w_t_qpm
        return est

    def resolve(self, now: float) -> ResolveResult | None:
        """Re-solve allocation and shift map over the alive workers."""
        alive = [w for w in self.workers if w.alive]
        if not alive:
            return None
        strategy = self.strategy
        w_t = self.workload(now)
        target = w_t
        if self.switch.mode is Mode.SWITCHING_TO_SM:
            target = WorkloadEstimate(w_t.w_t_qpm * self.switch.margin)
        plan = solve_allocation(target, self.catalog, len(alive), strategy, [w.id for w in alive])
        plan = churn_matching(plan, alive)
        ids = self.catalog.ids(strategy)
        hist = self.windows[strategy].snapshot()
        self.epoch += 1
        pasm = compute_pasm(hist.vector(ids), plan.f_vector(ids), ids, epoch=self.epoch)
        changes = []
        for w in alive:
            v = plan.assignment[w.id]
            current = w.loading[0] if w.loading else w.active_variant
            if v == current:
                continue
            if strategy is Strategy.AC:
                changes.append((w.id, v, 0.0))
            else:
                changes.append((w.id, v, self.catalog[v].load_time_s))
        self.plan, self.pasm = plan, pasm
        return ResolveResult(plan, pasm, changes, w_t)


def resolve_tick(now: float, arrivals_window: Sequence[float], workers: Sequence[WorkerState], catalog: Catalog,
                 switch: SwitchState, predictions: Sequence[int] = (), config: SchedulerConfig = SchedulerConfig()):
    """Functional form of one resolve: returns ``(plan, pasm, changes)``.

    ``predictions`` are predicted optimal level indices for the active
    strategy (most recent last).
    """
    cp = ControlPlane(catalog, len(workers), config, switch.mode)
    cp.workers = list(workers)
    cp.switch = switch
    for t in arrivals_window:
        cp.recent_arrivals.append(t)
    for lvl in list(predictions)[-config.window_size:]:
        cp.windows[cp.strategy].push(int(lvl))
    res = cp.resolve(now)
    if res is None:
        return None
    return res.plan, res.pasm, res.changes
