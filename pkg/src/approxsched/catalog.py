"""Approximation variants, their profiles, and the optimal-model rule.

Two strategies are modelled. AC (approximate caching) keeps one base model
resident and skips ``K`` of ``N`` denoising steps by resuming from a cached
intermediate state; SM (smaller models) swaps in distinct, cheaper models.
Each point on either spectrum is a :class:`Variant`.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np


class Strategy(str, enum.Enum):
    AC = "AC"
    SM = "SM"


class CatalogError(ValueError):
    pass


@dataclass(frozen=True)
class Variant:
    id: str
    strategy: Strategy
    level_index: int
    base_latency_s: float
    load_time_s: float
    avg_quality: float
    k_skip: int = 0
    peak_throughput_qpm: int = 0


@dataclass(frozen=True)
class VariantSpec:
    """One entry of a catalog config, before levels are assigned."""

    id: str
    strategy: Strategy
    latency_s: float
    load_time_s: float
    avg_quality: float
    k_skip: int = 0


@dataclass(frozen=True)
class CatalogConfig:
    variants: tuple[VariantSpec, ...]
    n_steps: int = 50
    delta: float = 0.9
    retrieval_overhead_s: float = 0.05


@dataclass(frozen=True)
class Catalog:
    variants_by_strategy: Mapping[Strategy, tuple[Variant, ...]]
    n_steps: int
    delta: float
    retrieval_overhead_s: float
    _by_id: Mapping[str, Variant] = field(repr=False, compare=False, default=None)

    def variants(self, strategy: Strategy) -> tuple[Variant, ...]:
        return self.variants_by_strategy[strategy]

    def ids(self, strategy: Strategy) -> tuple[str, ...]:
        return tuple(v.id for v in self.variants_by_strategy[strategy])

    def __getitem__(self, variant_id: str) -> Variant:
        return self._by_id[variant_id]

    def __contains__(self, variant_id: object) -> bool:
        return variant_id in self._by_id

    @property
    def strategies(self) -> tuple[Strategy, ...]:
        return tuple(self.variants_by_strategy)

    def all_variants(self) -> tuple[Variant, ...]:
        return tuple(v for vs in self.variants_by_strategy.values() for v in vs)

    def slowest(self, strategy: Strategy) -> Variant:
        return self.variants_by_strategy[strategy][0]

    def fastest(self, strategy: Strategy) -> Variant:
        return self.variants_by_strategy[strategy][-1]

    def subset(self, strategy: Strategy, ids: Sequence[str]) -> "Catalog":
        """Catalog restricted to ``ids`` of one strategy, levels re-indexed."""
        keep = set(ids)
        chosen = [v for v in self.variants(strategy) if v.id in keep]
        if len(chosen) != len(keep):
            raise CatalogError(f"unknown variant ids in {sorted(keep)}")
        reindexed = tuple(
            Variant(**{**v.__dict__, "level_index": i}) for i, v in enumerate(chosen)
        )
        return _make_catalog(
            {strategy: reindexed}, self.n_steps, self.delta, self.retrieval_overhead_s
        )


def _make_catalog(by_strategy, n_steps, delta, overhead) -> Catalog:
    by_id = {v.id: v for vs in by_strategy.values() for v in vs}
    return Catalog(dict(by_strategy), n_steps, delta, overhead, by_id)


# SDXL is the AC base model; SM latencies and load times are the A100 profile.
DEFAULT_SM = (
    VariantSpec("sdxl", Strategy.SM, 4.2, 9.42, 20.9),
    VariantSpec("sd15", Strategy.SM, 3.84, 5.56, 19.9),
    VariantSpec("small", Strategy.SM, 2.75, 4.86, 18.6),
    VariantSpec("tiny", Strategy.SM, 2.18, 2.91, 17.4),
)
DEFAULT_AC_K = (0, 5, 10, 15, 20, 25)
_DEFAULT_AC_QUALITY = (20.9, 20.7, 20.3, 19.6, 18.6, 17.4)


def default_ac_specs(
    base_latency_s: float = 4.2,
    base_load_time_s: float = 9.42,
    ks: Sequence[int] = DEFAULT_AC_K,
    qualities: Sequence[float] = _DEFAULT_AC_QUALITY,
) -> tuple[VariantSpec, ...]:
    return tuple(
        VariantSpec(f"ac-k{k}", Strategy.AC, base_latency_s, base_load_time_s, q, k)
        for k, q in zip(ks, qualities)
    )


def default_config(**overrides) -> CatalogConfig:
    return CatalogConfig(variants=default_ac_specs() + DEFAULT_SM, **overrides)


def _latency(spec_latency: float, k_skip: int, strategy: Strategy, n_steps: int, overhead: float) -> float:
    if strategy is Strategy.AC:
        return (n_steps - k_skip) / n_steps * spec_latency + overhead
    return spec_latency


def build_catalog(config: CatalogConfig | None = None) -> Catalog:
    """Validate a catalog config and assign level indices slow to fast.

    Levels are ordered by effective latency, descending; equal latencies are
    ordered by ``avg_quality`` descending.
    """
    config = config or default_config()
    if not 0 < config.delta <= 1:
        raise CatalogError(f"delta must be in (0, 1], got {config.delta}")
    if config.n_steps <= 0:
        raise CatalogError("n_steps must be positive")
    if config.retrieval_overhead_s < 0:
        raise CatalogError("retrieval_overhead_s must be non-negative")

    seen: set[str] = set()
    grouped: dict[Strategy, list[VariantSpec]] = {}
    for spec in config.variants:
        if spec.id in seen:
            raise CatalogError(f"duplicate variant id {spec.id!r}")
        seen.add(spec.id)
        if spec.latency_s <= 0:
            raise CatalogError(f"variant {spec.id!r}: latency must be positive")
        if spec.load_time_s < 0:
            raise CatalogError(f"variant {spec.id!r}: load time must be non-negative")
        if spec.strategy is Strategy.AC and not 0 <= spec.k_skip < config.n_steps:
            raise CatalogError(
                f"variant {spec.id!r}: K={spec.k_skip} outside [0, N={config.n_steps})"
            )
        grouped.setdefault(Strategy(spec.strategy), []).append(spec)

    if not grouped:
        raise CatalogError("catalog config lists no variants")

    by_strategy: dict[Strategy, tuple[Variant, ...]] = {}
    for strategy, specs in grouped.items():
        if len(specs) < 2:
            raise CatalogError(f"strategy {strategy.value} needs at least 2 variants")
        lat = {
            s.id: _latency(s.latency_s, s.k_skip, strategy, config.n_steps, config.retrieval_overhead_s)
            for s in specs
        }
        ordered = sorted(specs, key=lambda s: (-lat[s.id], -s.avg_quality, s.id))
        by_strategy[strategy] = tuple(
            Variant(
                id=s.id,
                strategy=strategy,
                level_index=i,
                base_latency_s=s.latency_s,
                load_time_s=s.load_time_s,
                avg_quality=s.avg_quality,
                k_skip=s.k_skip if strategy is Strategy.AC else 0,
                peak_throughput_qpm=math.floor(60.0 / lat[s.id] + 1e-9),
            )
            for i, s in enumerate(ordered)
        )
    # AC first when present: it is the default serving strategy.
    order = sorted(by_strategy, key=lambda s: s is not Strategy.AC)
    return _make_catalog(
        {s: by_strategy[s] for s in order},
        config.n_steps,
        config.delta,
        config.retrieval_overhead_s,
    )


def effective_latency(catalog: Catalog, v: Variant | str, retrieval_s: float | None = None) -> float:
    """Seconds to serve one image at variant ``v``.

    For AC this is ``(N - K) / N`` of the base model latency plus the cache
    retrieval overhead (nominal unless ``retrieval_s`` is given).
    """
    if isinstance(v, str):
        v = catalog[v]
    if v.strategy is Strategy.AC:
        overhead = catalog.retrieval_overhead_s if retrieval_s is None else retrieval_s
        return (catalog.n_steps - v.k_skip) / catalog.n_steps * v.base_latency_s + overhead
    return v.base_latency_s


def optimal_variant(
    quality_vector: Mapping[str, float], catalog: Catalog, strategy: Strategy | None = None
) -> Variant:
    """Fastest variant whose score exceeds ``delta`` times the best score.

    ``quality_vector`` maps variant id to score. Only variants of
    ``strategy`` are considered (inferred from the keys when omitted).
    """
    if not quality_vector:
        raise CatalogError("empty quality vector")
    if strategy is None:
        strategy = catalog[next(iter(quality_vector))].strategy
    candidates = [v for v in catalog.variants(strategy) if v.id in quality_vector]
    if not candidates:
        raise CatalogError(f"quality vector covers no {strategy.value} variant")
    best = max(quality_vector[v.id] for v in candidates)
    threshold = catalog.delta * best
    eligible = [v for v in candidates if quality_vector[v.id] > threshold]
    if not eligible:
        # Only reachable with non-positive scores; fall back to the argmax.
        eligible = [v for v in candidates if quality_vector[v.id] == best]
    return min(eligible, key=lambda v: (effective_latency(catalog, v), v.level_index))


DegradationFn = Callable[[Variant, Variant], float]


def default_degradation(v_to: Variant, v_from: Variant) -> float:
    """Squared level gap times the average-quality drop; zero unless faster."""
    gap = v_to.level_index - v_from.level_index
    if gap <= 0 or v_to.peak_throughput_qpm <= v_from.peak_throughput_qpm:
        return 0.0
    return gap * gap * max(v_from.avg_quality - v_to.avg_quality, 0.0)


def degradation_table(catalog: Catalog, strategy: Strategy, d: DegradationFn = default_degradation):
    """Matrix ``T[to, from]`` of ``d`` over the strategy's ordered variants."""
    vs = catalog.variants(strategy)
    n = len(vs)
    table = np.zeros((n, n))
    for j in range(n):
        for i in range(n):
            table[j, i] = d(vs[j], vs[i])
    return table
