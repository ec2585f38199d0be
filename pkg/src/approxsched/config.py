"""Run configuration files (YAML or JSON) and their translation to sim objects."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import yaml

from .affinity import ClassifierOracle
from .catalog import CatalogConfig, CatalogError, Strategy, VariantSpec, build_catalog, default_config
from .scheduler import Mode, SchedulerConfig, SwitchConfig
from .simulator import Fault, FaultError, FaultScript, Policy, SimConfig
from .workload import AffinityModel, ArrivalTrace, TraceError, gen_bursty, gen_constant, gen_ramp, load_trace

OUT_ENV = "APPROXSCHED_OUT"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class WorkloadSpec:
    trace: str | None = None
    generator: Mapping[str, Any] | None = None
    seed: int | None = None  # generator seed; defaults to the run seed

    def __post_init__(self):
        if (self.trace is None) == (self.generator is None):
            raise ConfigError("workload needs exactly one of 'trace' or 'generator'")

    def build(self, run_seed: int, base_dir: Path | None = None) -> ArrivalTrace:
        if self.trace is not None:
            path = Path(self.trace)
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            if not path.exists():
                raise ConfigError(f"trace file not found: {path}")
            try:
                return load_trace(path)
            except TraceError as exc:
                raise ConfigError(str(exc)) from exc
        return generate(dict(self.generator), self.seed if self.seed is not None else run_seed)


def generate(params: dict, seed: int) -> ArrivalTrace:
    kind = params.pop("kind", None)
    try:
        if kind == "ramp":
            return gen_ramp(params["start_qpm"], params["end_qpm"], params["duration_min"], seed)
        if kind == "constant":
            return gen_constant(params["qpm"], params["duration_min"], seed)
        if kind == "bursty":
            return gen_bursty(params["low_qpm"], params["high_qpm"], params["period_min"], params["duty"],
                              params["duration_min"], seed)
    except KeyError as exc:
        raise ConfigError(f"{kind} generator missing parameter {exc.args[0]!r}") from None
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    raise ConfigError(f"unknown generator kind {kind!r} (ramp, constant, bursty)")


@dataclass(frozen=True)
class RunConfig:
    workload: WorkloadSpec
    sim: SimConfig = SimConfig()
    policies: tuple[Policy, ...] = (Policy.PROMPT_AWARE,)
    faults: FaultScript = FaultScript()
    seeds: tuple[int, ...] = (0,)
    output_dir: str = "out"
    name: str = "run"
    base_dir: Path | None = None

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")

    def out_dir(self) -> Path:
        return Path(os.environ.get(OUT_ENV) or self.output_dir)


def _section(raw: Mapping, key: str, cls, convert=None):
    data = raw.get(key) or {}
    if not isinstance(data, Mapping):
        raise ConfigError(f"'{key}' must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown keys in '{key}': {sorted(unknown)}")
    data = dict(data)
    if convert:
        data = convert(data)
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad '{key}' section: {exc}") from exc


def _catalog(raw) -> CatalogConfig:
    if raw is None:
        return default_config()
    raw = dict(raw)
    variants = raw.pop("variants", None)
    try:
        if variants is None:
            return default_config(**raw)
        specs = tuple(
            VariantSpec(**{**v, "strategy": Strategy(str(v["strategy"]).upper())}) for v in variants
        )
        return CatalogConfig(specs, **raw)
    except (TypeError, KeyError, ValueError) as exc:
        raise ConfigError(f"bad catalog section: {exc}") from exc


def _faults(raw) -> FaultScript:
    faults = []
    for i, f in enumerate(raw or ()):
        try:
            faults.append(Fault(
                float(f["start_s"]), float(f["end_s"]), str(f["kind"]),
                tuple(int(w) for w in f.get("workers", ())), float(f.get("multiplier", 1.0)),
            ))
        except KeyError as exc:
            raise ConfigError(f"fault {i} missing {exc.args[0]!r}") from None
        except FaultError as exc:
            raise ConfigError(f"fault {i}: {exc}") from exc
    return FaultScript(tuple(faults))


def _affinity(d: dict) -> dict:
    if "histograms" in d:
        d["histograms"] = {Strategy(str(k).upper()): dict(v) for k, v in d["histograms"].items()}
    if "miss_margin" in d:
        d["miss_margin"] = tuple(d["miss_margin"])
    return d


def _classifier(d: dict) -> dict:
    if "drift" in d:
        d["drift"] = tuple((float(t), float(a)) for t, a in d["drift"])
    return d


TOP_KEYS = {"name", "catalog", "workload", "policy", "policies", "faults", "seeds", "seed", "output_dir",
            "sim", "scheduler", "switch", "affinity", "classifier"}


def parse_config(raw: Mapping, base_dir: Path | None = None) -> RunConfig:
    if not isinstance(raw, Mapping):
        raise ConfigError("config must be a mapping")
    unknown = set(raw) - TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    if "workload" not in raw:
        raise ConfigError("config needs a 'workload' section")
    w = raw["workload"]
    if not isinstance(w, Mapping) or set(w) - {"trace", "generator", "seed"}:
        raise ConfigError("workload takes 'trace' or 'generator', plus optional 'seed'")
    workload = WorkloadSpec(w.get("trace"), w.get("generator"), w.get("seed"))

    try:
        catalog = build_catalog(_catalog(raw.get("catalog")))
    except CatalogError as exc:
        raise ConfigError(str(exc)) from exc

    switch = _section(raw, "switch", SwitchConfig)
    scheduler = _section(raw, "scheduler", SchedulerConfig)
    scheduler = dataclasses.replace(scheduler, switch=switch)
    affinity = _section(raw, "affinity", AffinityModel, _affinity)
    classifier = _section(raw, "classifier", ClassifierOracle, _classifier)

    def sim_convert(d):
        if "initial_mode" in d:
            d["initial_mode"] = Mode(str(d["initial_mode"]).upper())
        return d

    sim = _section(raw, "sim", SimConfig, sim_convert)
    sim = dataclasses.replace(sim, catalog=catalog, scheduler=scheduler, affinity=affinity, classifier=classifier)

    names = raw.get("policies") or [raw.get("policy", "prompt_aware")]
    try:
        policies = tuple(Policy.parse(str(p)) for p in names)
    except ValueError as exc:
        raise ConfigError(f"unknown policy: {exc}") from exc
    seeds = raw.get("seeds", [raw.get("seed", 0)])
    if not isinstance(seeds, (list, tuple)):
        seeds = [seeds]
    faults = _faults(raw.get("faults"))
    try:
        faults.validate(sim.n_workers)
    except FaultError as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(
        workload, sim, policies, faults, tuple(int(s) for s in seeds),
        str(raw.get("output_dir", "out")), str(raw.get("name", "run")), base_dir,
    )


def load_config(path: str | os.PathLike) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        raw = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return parse_config(raw or {}, path.parent)
