"""Deterministic discrete-event simulation of an approximation-scaling cluster.

Workers serve one prompt at a time, FIFO. Events are ordered by time, then
a fixed kind priority, then insertion sequence, so a run is a pure function
of its configuration, trace, fault script and seed.
"""

from __future__ import annotations

import enum
import heapq
import itertools
import logging
import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .affinity import ClassifierOracle, predict_levels
from .catalog import Catalog, Strategy, build_catalog, effective_latency
from .metrics import CompletionLog, MetricsReport, Utilization, finalize, slo_threshold
from .oda import Pasm
from .scheduler import (
    ControlPlane,
    Job,
    Mode,
    SchedulerConfig,
    WorkerState,
    place,
    serving_strategy,
    update_switch,
)
from .workload import AffinityModel, ArrivalTrace, synthesize_batch

logger = logging.getLogger(__name__)


class Policy(str, enum.Enum):
    PROMPT_AWARE = "prompt_aware"
    PROMPT_AGNOSTIC = "prompt_agnostic"
    STATIC_SLOWEST = "static_slowest"
    STATIC_FASTEST = "static_fastest"
    UNIFORM_LARGEST_AC = "uniform_largest_ac"

    @classmethod
    def parse(cls, name: str) -> "Policy":
        key = name.strip().lower().replace("-", "_")
        aliases = {"promptaware": "prompt_aware", "pac": "prompt_agnostic", "promptagnostic": "prompt_agnostic", "staticslowest": "static_slowest",
                   "staticfastest": "static_fastest", "uniformlargestac": "uniform_largest_ac",
                   "clipper_ha": "static_slowest", "clipper_ht": "static_fastest", "nirvana": "uniform_largest_ac"}
        return cls(aliases.get(key, key))

    @property
    def adaptive(self) -> bool:
        return self in (Policy.PROMPT_AWARE, Policy.PROMPT_AGNOSTIC)


class EventKind(enum.IntEnum):
    # Value is the tie-break priority at equal timestamps.
    FAILURE_START = 0
    FAILURE_END = 1
    LOAD_COMPLETE = 2
    RESOLVE_TICK = 3
    ARRIVAL = 4
    SERVICE_COMPLETE = 5
    PROBE = 6


class FaultError(ValueError):
    pass


@dataclass(frozen=True)
class Fault:
    start_s: float
    end_s: float
    kind: str  # "gpu_down" | "retrieval_degraded"
    workers: tuple[int, ...] = ()
    multiplier: float = 1.0

    def __post_init__(self):
        if self.kind not in ("gpu_down", "retrieval_degraded"):
            raise FaultError(f"unknown fault kind {self.kind!r}")
        if not self.start_s < self.end_s:
            raise FaultError(f"fault must start before it ends ({self.start_s} >= {self.end_s})")
        if self.kind == "retrieval_degraded" and self.multiplier <= 0:
            raise FaultError("retrieval multiplier must be positive")


@dataclass(frozen=True)
class FaultScript:
    faults: tuple[Fault, ...] = ()

    def validate(self, n_workers: int) -> None:
        for f in self.faults:
            bad = [w for w in f.workers if not 0 <= w < n_workers]
            if bad:
                raise FaultError(f"fault names unknown workers {bad}")


@dataclass(frozen=True)
class SimConfig:
    n_workers: int = 8
    catalog: Catalog | None = None
    affinity: AffinityModel = AffinityModel()
    classifier: ClassifierOracle = ClassifierOracle()
    scheduler: SchedulerConfig = SchedulerConfig()
    initial_mode: Mode = Mode.AC
    retrieval_jitter: float = 0.1
    drain_s: float = 600.0
    slo_s: float | None = None
    reroute_on_resolve: bool = False

    def resolved_catalog(self) -> Catalog:
        return self.catalog if self.catalog is not None else build_catalog()


@dataclass
class PlanRecord:
    time_s: float
    mode: str
    w_t: float
    counts: dict
    feasible: bool
    n_alive: int
    epoch: int


@dataclass
class SimResult:
    report: MetricsReport
    completions: CompletionLog
    plans: list[PlanRecord]
    pasms: list[Pasm]
    switches: list[tuple[float, str, str]]
    end_time_s: float
    n_arrivals: int
    n_unfinished: int
    slo_s: float


@dataclass
class _Fault:
    fault: Fault
    active: bool = False


class Simulation:
    def __init__(self, config: SimConfig, trace: ArrivalTrace, faults: FaultScript, policy: Policy, seed: int):
        if config.n_workers < 1:
            raise ValueError("need at least one worker")
        faults.validate(config.n_workers)
        self.config = config
        self.policy = policy
        self.trace = trace
        self.catalog = catalog = config.resolved_catalog()
        self.faults = [_Fault(f) for f in faults.faults]

        ss = np.random.SeedSequence(seed)
        prompt_rng, cls_rng, route_rng, jitter_rng, self.reroute_rng, self.probe_rng = (
            np.random.default_rng(s) for s in ss.spawn(6)
        )
        n = len(trace)
        self.times = np.asarray(trace.times, dtype=float)
        self.prompts = synthesize_batch(prompt_rng, config.affinity, catalog, n)
        self.col = {v: i for i, v in enumerate(self.prompts.variant_ids)}
        self.best = self.prompts.quality.max(axis=1) if n else np.empty(0)
        self.pred = {
            s: predict_levels(config.classifier, self.prompts.targets[s], len(catalog.ids(s)), cls_rng, self.times)
            for s in catalog.strategies
        }
        self.route_u = route_rng.random(n)
        sigma = config.retrieval_jitter
        self.jitter = jitter_rng.lognormal(-sigma * sigma / 2, sigma, n) if sigma > 0 else np.ones(n)

        has_ac = Strategy.AC in catalog.strategies
        has_sm = Strategy.SM in catalog.strategies
        mode = config.initial_mode
        if policy in (Policy.STATIC_SLOWEST, Policy.STATIC_FASTEST):
            mode = Mode.SM if has_sm else Mode.AC
        elif policy is Policy.UNIFORM_LARGEST_AC:
            if not has_ac:
                raise ValueError("uniform_largest_ac needs AC variants")
            mode = Mode.AC
        elif mode is Mode.AC and not has_ac:
            mode = Mode.SM
        self.switching = (
            policy.adaptive and config.scheduler.enable_switching and has_ac and has_sm
        )
        self.cp = ControlPlane(catalog, config.n_workers, config.scheduler, mode)
        self.workers = self.cp.workers

        self.slo_s = config.slo_s if config.slo_s is not None else slo_threshold(
            [effective_latency(catalog, v) for v in catalog.all_variants()]
        )
        self.heap: list = []
        self.seq = itertools.count()
        self.pending: deque = deque()
        self.completions = CompletionLog()
        self.plans: list[PlanRecord] = []
        self.pasms: list[Pasm] = []
        self.switches: list[tuple[float, str, str]] = []
        self.retrieval_mult = 1.0
        self.next_arrival = 0
        self.rr = 0
        self.in_flight_start: dict[int, float] = {}
        self.load_token: dict[int, int] = {}
        self.alive_since = {w.id: 0.0 for w in self.workers}
        self.busy_intervals: list[tuple[float, float]] = []
        self.alive_intervals: list[tuple[float, float]] = []
        self.now = 0.0
        self.probe_scheduled = False

    # -- event plumbing -------------------------------------------------

    def push(self, t: float, kind: EventKind, payload=None) -> None:
        heapq.heappush(self.heap, (t, int(kind), next(self.seq), kind, payload))

    def outstanding(self) -> int:
        return (
            len(self.pending)
            + sum(w.queue_len for w in self.workers)
            + (len(self.trace) - self.next_arrival)
        )

    # -- setup ----------------------------------------------------------

    def _initial_variants(self) -> None:
        cat = self.catalog
        if self.policy is Policy.STATIC_SLOWEST:
            v = cat.slowest(serving_strategy(self.cp.switch.mode)).id
        elif self.policy is Policy.STATIC_FASTEST:
            v = cat.fastest(serving_strategy(self.cp.switch.mode)).id
        else:
            v = cat.slowest(serving_strategy(self.cp.switch.mode)).id
        for w in self.workers:
            w.active_variant = v
            w.loaded_variants = {v}

    def run(self) -> SimResult:
        self._initial_variants()
        if self.policy.adaptive:
            self.push(0.0, EventKind.RESOLVE_TICK)
        for i, f in enumerate(self.faults):
            self.push(f.fault.start_s, EventKind.FAILURE_START, i)
            self.push(f.fault.end_s, EventKind.FAILURE_END, i)
        if len(self.trace):
            self.push(float(self.times[0]), EventKind.ARRIVAL, 0)
        horizon = self.trace.duration_s + self.config.drain_s
        end = self.trace.duration_s
        handlers = {
            EventKind.ARRIVAL: self._on_arrival,
            EventKind.SERVICE_COMPLETE: self._on_service_complete,
            EventKind.RESOLVE_TICK: self._on_resolve,
            EventKind.LOAD_COMPLETE: self._on_load_complete,
            EventKind.PROBE: self._on_probe,
            EventKind.FAILURE_START: self._on_failure_start,
            EventKind.FAILURE_END: self._on_failure_end,
        }
        hit_horizon = False
        while self.heap:
            t, _, _, kind, payload = heapq.heappop(self.heap)
            if t > horizon:
                hit_horizon = True
                break
            self.now = t
            handlers[kind](payload)
            if kind is EventKind.SERVICE_COMPLETE:
                end = max(end, t)
        if hit_horizon or self.outstanding():
            end = horizon
        return self._finish(end)

    def _finish(self, end: float) -> SimResult:
        for w in self.workers:
            if w.in_service is not None:
                self.busy_intervals.append((self.in_flight_start[w.id], min(w.busy_until_s, end)))
            if w.alive:
                self.alive_intervals.append((self.alive_since[w.id], end))
        n_minutes = int(math.ceil(end / 60.0 - 1e-12)) if end > 0 else 0
        util = Utilization(n_minutes)
        for s, e in self.busy_intervals:
            util.add_busy(s, min(e, end))
        for s, e in self.alive_intervals:
            util.add_alive(s, min(e, end))
        report = finalize(self.completions, len(self.trace), self.slo_s, end, util)
        return SimResult(
            report, self.completions, self.plans, self.pasms, self.switches, end,
            len(self.trace), report.n_unfinished, self.slo_s,
        )

    # -- arrivals and routing -------------------------------------------

    def _on_arrival(self, i: int) -> None:
        if i + 1 < len(self.trace):
            self.push(float(self.times[i + 1]), EventKind.ARRIVAL, i + 1)
        self.next_arrival = i + 1
        self.cp.observe_arrival(self.now, None)
        if self.policy is Policy.PROMPT_AWARE:
            # The classifier scores every strategy so a switch starts warm.
            for s, window in self.cp.windows.items():
                window.push(int(self.pred[s][i]))
        self._dispatch(Job(i, float(self.times[i])), self.route_u[i])

    def _dispatch(self, job: Job, u: float) -> None:
        placed = self._route(job, u)
        if placed is None:
            self.pending.append(job)
            return
        wid, _ = placed
        self.workers[wid].queue.append(job)
        self._try_start(self.workers[wid])

    def _route(self, job: Job, u: float):
        cat, workers = self.catalog, self.workers
        slower_first = self.config.scheduler.slower_first
        if self.policy is Policy.PROMPT_AWARE:
            strategy = self.cp.strategy
            pasm = self.cp.pasm
            predicted = cat.ids(strategy)[int(self.pred[strategy][job.prompt])]
            assigned = pasm.ids[pasm.sample_level(pasm.index(predicted), u)]
            return place(workers, assigned, cat, slower_first)
        if self.policy is Policy.PROMPT_AGNOSTIC:
            ids = cat.ids(self.cp.strategy)
            f = self.cp.plan.f_vector(ids) if self.cp.plan is not None else np.eye(len(ids))[0]
            level = min(int(np.searchsorted(np.cumsum(f), u, side="right")), len(ids) - 1)
            return place(workers, ids[level], cat, slower_first)
        if self.policy is Policy.UNIFORM_LARGEST_AC:
            job.variant = cat.ids(Strategy.AC)[int(self.pred[Strategy.AC][job.prompt])]
            n = len(workers)
            for k in range(n):
                w = workers[(self.rr + k) % n]
                if w.serving:
                    self.rr = (w.id + 1) % n
                    return w.id, job.variant
            return None
        # Static policies: every worker runs the same variant.
        return place(workers, workers[0].active_variant or self._static_variant(), cat, slower_first)

    def _static_variant(self) -> str:
        for w in self.workers:
            if w.active_variant:
                return w.active_variant
        return self.catalog.slowest(serving_strategy(self.cp.switch.mode)).id

    def _drain_pending(self) -> None:
        if not self.pending:
            return
        jobs, self.pending = list(self.pending), deque()
        for job in jobs:
            self._dispatch(job, self.reroute_rng.random())

    # -- service ----------------------------------------------------------

    def _try_start(self, w: WorkerState) -> None:
        if not w.serving or w.in_service is not None or not w.queue:
            return
        job = w.queue.popleft()
        variant = self.catalog[job.variant or w.active_variant]
        retrieval = 0.0
        if variant.strategy is Strategy.AC:
            retrieval = self.catalog.retrieval_overhead_s * self.retrieval_mult * float(self.jitter[job.prompt])
        service = effective_latency(self.catalog, variant, retrieval)
        w.in_service = job
        w.busy_until_s = self.now + service
        self.in_flight_start[w.id] = self.now
        self.push(self.now + service, EventKind.SERVICE_COMPLETE, (w.id, w.generation, job, self.now, variant.id, retrieval))
        if variant.strategy is Strategy.AC and self.switching and self.cp.switch.mode is Mode.AC:
            self._set_switch(update_switch(self.cp.switch, self.now, retrieval_sample_s=retrieval))

    def _on_service_complete(self, payload) -> None:
        wid, gen, job, start, vid, retrieval = payload
        w = self.workers[wid]
        if gen != w.generation or w.in_service is not job:
            return
        i = job.prompt
        self.completions.append(
            i, job.arrival_s, start, self.now, vid,
            float(self.prompts.quality[i, self.col[vid]]), float(self.best[i]), retrieval, wid,
        )
        self.busy_intervals.append((start, self.now))
        w.in_service = None
        self._try_start(w)

    # -- resolve ticks and model loads ------------------------------------

    def _on_resolve(self, _=None) -> None:
        self._resolve()
        if self.now < self.trace.duration_s or self.outstanding():
            self.push(self.now + self.config.scheduler.resolve_interval_s, EventKind.RESOLVE_TICK)

    def _resolve(self) -> None:
        if self.cp.switch.mode is Mode.SWITCHING_TO_AC:
            return
        res = self.cp.resolve(self.now)
        if res is None:
            return
        blocking = self.cp.switch.mode is Mode.SM
        for wid, v, load_s in res.changes:
            w = self.workers[wid]
            if load_s == 0.0 or v in w.loaded_variants:
                w.active_variant = v
                w.loaded_variants = {v}
                w.loading = None
                self.load_token[wid] = self.load_token.get(wid, 0) + 1
            else:
                self._start_load(w, v, load_s, blocking)
        self.pasms.append(res.pasm)
        self.plans.append(PlanRecord(
            self.now, self.cp.switch.mode.value, res.w_t.w_t_qpm, res.plan.counts(), res.plan.feasible,
            len(res.plan.assignment), res.pasm.epoch,
        ))
        if self.config.reroute_on_resolve:
            for w in self.workers:
                while w.queue:
                    self.pending.append(w.queue.pop())
            self.pending = deque(sorted(self.pending, key=lambda j: (j.arrival_s, j.prompt)))
        self._drain_pending()
        for w in self.workers:
            self._try_start(w)
        if self.cp.switch.mode is Mode.SWITCHING_TO_SM and not any(w.loading for w in self.workers if w.alive):
            self._set_switch(update_switch(self.cp.switch, self.now, small_model_ready=True))

    def _start_load(self, w: WorkerState, v: str, load_s: float, blocking: bool) -> None:
        token = self.load_token.get(w.id, 0) + 1
        self.load_token[w.id] = token
        w.loading = (v, self.now + load_s, blocking)
        self.push(self.now + load_s, EventKind.LOAD_COMPLETE, (w.id, v, token))

    def _on_load_complete(self, payload) -> None:
        wid, v, token = payload
        w = self.workers[wid]
        if token != self.load_token.get(wid) or not w.alive:
            return
        w.loading = None
        mode = self.cp.switch.mode
        if mode is Mode.SWITCHING_TO_AC and self.catalog[v].strategy is Strategy.AC:
            w.loaded_variants.add(v)
            if all(self._holds_ac_base(x) for x in self.workers if x.alive):
                self._set_switch(update_switch(self.cp.switch, self.now, large_models_ready=True))
            return
        w.active_variant = v
        w.loaded_variants = {v}
        if mode is Mode.SWITCHING_TO_SM and v != self.catalog.slowest(Strategy.SM).id:
            self._set_switch(update_switch(self.cp.switch, self.now, small_model_ready=True))
        self._drain_pending()
        self._try_start(w)

    def _holds_ac_base(self, w: WorkerState) -> bool:
        base = self.catalog.slowest(Strategy.AC).id
        return base in w.loaded_variants or w.active_variant == self.catalog.slowest(Strategy.SM).id

    # -- strategy switching -----------------------------------------------

    def _set_switch(self, new) -> None:
        old = self.cp.switch
        self.cp.switch = new
        if new.mode is old.mode:
            return
        self.switches.append((self.now, old.mode.value, new.mode.value))
        logger.info("t=%.1f switch %s -> %s", self.now, old.mode.value, new.mode.value)
        if new.mode is Mode.SWITCHING_TO_SM:
            self._enter_switching_to_sm()
        elif new.mode is Mode.SM:
            self._schedule_probe()
        elif new.mode is Mode.SWITCHING_TO_AC:
            self._enter_switching_to_ac()
        elif new.mode is Mode.AC:
            base = self.catalog.slowest(Strategy.AC).id
            for w in self.workers:
                w.active_variant = base
                w.loaded_variants = {base}
                w.loading = None
                self.load_token[w.id] = self.load_token.get(w.id, 0) + 1
            self._resolve()

    def _enter_switching_to_sm(self) -> None:
        # The cache-free base model is the largest SM variant; no load needed.
        large = self.catalog.slowest(Strategy.SM).id
        for w in self.workers:
            w.active_variant = large
            w.loaded_variants = {large}
            w.loading = None
            self.load_token[w.id] = self.load_token.get(w.id, 0) + 1
        self._resolve()

    def _enter_switching_to_ac(self) -> None:
        base = self.catalog.slowest(Strategy.AC)
        for w in self.workers:
            # Pending small-model loads are abandoned; the worker keeps serving.
            token = self.load_token.get(w.id, 0) + 1
            self.load_token[w.id] = token
            w.loading = None
            if w.alive and not self._holds_ac_base(w):
                w.loading = (base.id, self.now + base.load_time_s, False)
                self.push(self.now + base.load_time_s, EventKind.LOAD_COMPLETE, (w.id, base.id, token))
        if all(self._holds_ac_base(w) for w in self.workers if w.alive):
            self._set_switch(update_switch(self.cp.switch, self.now, large_models_ready=True))

    def _schedule_probe(self) -> None:
        if not self.probe_scheduled:
            self.probe_scheduled = True
            self.push(self.now + self.cp.switch.probe_interval_s, EventKind.PROBE)

    def _on_probe(self, _=None) -> None:
        self.probe_scheduled = False
        if self.cp.switch.mode is not Mode.SM:
            return
        sigma = self.config.retrieval_jitter
        jitter = self.probe_rng.lognormal(-sigma * sigma / 2, sigma) if sigma > 0 else 1.0
        sample = self.catalog.retrieval_overhead_s * self.retrieval_mult * jitter
        self._set_switch(update_switch(self.cp.switch, self.now, probe_sample_s=sample))
        if self.cp.switch.mode is Mode.SM and (self.now < self.trace.duration_s or self.outstanding()):
            self._schedule_probe()

    # -- faults -------------------------------------------------------------

    def _on_failure_start(self, idx: int) -> None:
        apply_fault(self, idx, start=True)

    def _on_failure_end(self, idx: int) -> None:
        apply_fault(self, idx, start=False)

    def _recompute_retrieval(self) -> None:
        mult = 1.0
        for f in self.faults:
            if f.active and f.fault.kind == "retrieval_degraded":
                mult *= f.fault.multiplier
        self.retrieval_mult = mult


def apply_fault(sim: Simulation, idx: int, start: bool) -> None:
    """Apply the start or end of fault ``idx`` to the simulation state.

    Failed workers lose their in-flight and queued prompts to the head of
    the global pending set, which is re-routed to surviving workers.
    """
    entry = sim.faults[idx]
    fault = entry.fault
    if not start and not entry.active:
        logger.warning("fault %d ended without having started; ignored", idx)
        return
    entry.active = start
    if fault.kind == "retrieval_degraded":
        sim._recompute_retrieval()
        return
    if start:
        orphaned: list[Job] = []
        for wid in fault.workers:
            w = sim.workers[wid]
            if not w.alive:
                continue
            if w.in_service is not None:
                sim.busy_intervals.append((sim.in_flight_start[wid], sim.now))
                orphaned.append(w.in_service)
                w.in_service = None
            orphaned.extend(w.queue)
            w.queue.clear()
            w.alive = False
            w.generation += 1
            w.loading = None
            sim.load_token[wid] = sim.load_token.get(wid, 0) + 1
            sim.alive_intervals.append((sim.alive_since[wid], sim.now))
        orphaned.sort(key=lambda j: (j.arrival_s, j.prompt))
        sim.pending.extendleft(reversed(orphaned))
    else:
        for wid in fault.workers:
            w = sim.workers[wid]
            if w.alive:
                continue
            # Still listed down by another active fault?
            if any(f.active and f.fault.kind == "gpu_down" and wid in f.fault.workers for f in sim.faults):
                continue
            w.alive = True
            sim.alive_since[wid] = sim.now
    sim._drain_pending()
    for w in sim.workers:
        sim._try_start(w)


def simulate(
    config: SimConfig,
    trace: ArrivalTrace,
    fault_script: FaultScript = FaultScript(),
    policy: Policy | str = Policy.PROMPT_AWARE,
    seed: int = 0,
) -> SimResult:
    if isinstance(policy, str):
        policy = Policy.parse(policy)
    return Simulation(config, trace, fault_script, policy, seed).run()


def run(
    config: SimConfig,
    trace: ArrivalTrace,
    fault_script: FaultScript = FaultScript(),
    policy: Policy | str = Policy.PROMPT_AWARE,
    seed: int = 0,
) -> MetricsReport:
    """Simulate one run and return its metrics."""
    return simulate(config, trace, fault_script, policy, seed).report


def write_completions(result: SimResult, path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["prompt", "arrival_s", "start_s", "finish_s", "variant", "quality", "retrieval_s", "worker"])
        c = result.completions
        for row in zip(c.prompt, c.arrival_s, c.start_s, c.finish_s, c.variant, c.quality, c.retrieval_s, c.worker):
            w.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3]), row[4], repr(row[5]), repr(row[6]), row[7]])
