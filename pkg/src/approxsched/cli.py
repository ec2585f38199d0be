"""Command-line experiment runner.

Subcommands: ``run`` and ``compare`` execute simulations from a config
file, ``validate`` runs the oracle suites, ``gen-trace`` writes an arrival
trace. Exit status is 2 for configuration errors and 1 for runtime errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, generate, load_config
from .metrics import export_csv
from .simulator import Policy, SimResult, simulate, write_completions
from .validate import SUITES, run_suites
from .workload import save_trace

log = logging.getLogger("approxsched")


def _override(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seeds=tuple(args.seed))
    if getattr(args, "out", None):
        cfg = dataclasses.replace(cfg, output_dir=args.out)
    if getattr(args, "workers", None):
        cfg = dataclasses.replace(cfg, sim=dataclasses.replace(cfg.sim, n_workers=args.workers))
        try:
            cfg.faults.validate(args.workers)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    if getattr(args, "policy", None):
        try:
            cfg = dataclasses.replace(cfg, policies=(Policy.parse(args.policy),))
        except ValueError as exc:
            raise ConfigError(f"unknown policy {args.policy!r}") from exc
    return cfg


def _stem(cfg: RunConfig, policy: Policy, seed: int) -> str:
    return f"{cfg.name}_{policy.value}_seed{seed}"


def _write_run(out: Path, stem: str, result: SimResult, completions: bool) -> Path:
    path = out / f"{stem}.csv"
    export_csv(result.report, path)
    with open(out / f"{stem}_plans.json", "w") as fh:
        json.dump([dataclasses.asdict(p) for p in result.plans], fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(out / f"{stem}_pasm.txt", "w") as fh:
        for pasm in result.pasms:
            pasm.dump(fh)
    if completions:
        write_completions(result, out / f"{stem}_completions.csv")
    return path


def summary_row(policy: str, result: SimResult) -> str:
    a = result.report.aggregate
    return (f"{policy:<20} {a.throughput_qpm:>10.2f} {a.slo_violation_ratio:>10.4f} {a.effective_quality:>10.3f} "
            f"{a.relative_quality_pct:>9.2f} {a.utilization_pct:>8.2f} {len(result.switches):>8d}")


HEADER = f"{'policy':<20} {'qpm':>10} {'slo_viol':>10} {'eff_qual':>10} {'rel_pct':>9} {'util':>8} {'switches':>8}"


def cmd_run(args) -> int:
    cfg = _override(load_config(args.config), args)
    out = cfg.out_dir()
    out.mkdir(parents=True, exist_ok=True)
    for seed in cfg.seeds:
        trace = cfg.workload.build(seed, cfg.base_dir)
        print(f"seed {seed}: {len(trace)} arrivals, checksum {trace.checksum()}")
        for policy in cfg.policies:
            result = simulate(cfg.sim, trace, cfg.faults, policy, seed)
            path = _write_run(out, _stem(cfg, policy, seed), result, args.completions)
            print(HEADER)
            print(summary_row(policy.value, result))
            print(f"wrote {path}")
    return 0


def cmd_compare(args) -> int:
    cfg = load_config(args.config)
    if args.policies:
        try:
            policies = tuple(Policy.parse(p) for p in args.policies.split(","))
        except ValueError as exc:
            raise ConfigError(f"unknown policy in {args.policies!r}") from exc
        cfg = dataclasses.replace(cfg, policies=policies)
    cfg = _override(cfg, args)
    if len(set(cfg.policies)) < 2:
        raise ConfigError("compare needs at least two distinct policies")
    out = cfg.out_dir()
    out.mkdir(parents=True, exist_ok=True)
    for seed in cfg.seeds:
        trace = cfg.workload.build(seed, cfg.base_dir)
        lines = [f"# {cfg.name} seed {seed}: {len(trace)} arrivals, checksum {trace.checksum()}", HEADER]
        for policy in cfg.policies:
            result = simulate(cfg.sim, trace, cfg.faults, policy, seed)
            _write_run(out, _stem(cfg, policy, seed), result, args.completions)
            lines.append(summary_row(policy.value, result))
        text = "\n".join(lines) + "\n"
        (out / f"{cfg.name}_compare_seed{seed}.txt").write_text(text)
        sys.stdout.write(text)
    return 0


def cmd_validate(args) -> int:
    names = tuple(s.strip() for s in args.suites.split(",")) if args.suites else SUITES
    try:
        results = run_suites(names)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    ok = True
    for r in results:
        print(r.line())
        if not r.ok:
            ok = False
            print(f"  first counterexample: {r.counterexample}")
    return 0 if ok else 1


def cmd_gen_trace(args) -> int:
    params = {"kind": args.kind, "duration_min": args.duration_min}
    if args.kind == "ramp":
        params.update(start_qpm=args.start_qpm, end_qpm=args.end_qpm)
    elif args.kind == "constant":
        params.update(qpm=args.qpm)
    else:
        params.update(low_qpm=args.low_qpm, high_qpm=args.high_qpm, period_min=args.period_min, duty=args.duty)
    missing = [k for k, v in params.items() if v is None]
    if missing:
        raise ConfigError(f"{args.kind} trace needs --{missing[0].replace('_', '-')}")
    trace = generate(params, args.seed)
    save_trace(trace, args.out)
    print(f"wrote {len(trace)} arrivals to {args.out} (checksum {trace.checksum()})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="approxsched", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def sim_args(sp):
        sp.add_argument("config", help="YAML or JSON run config")
        sp.add_argument("--seed", type=int, action="append", help="override seeds (repeatable)")
        sp.add_argument("--out", help="output directory (else $APPROXSCHED_OUT, else the config's)")
        sp.add_argument("--workers", type=int, help="override worker count")
        sp.add_argument("--completions", action="store_true", help="also write per-prompt completion CSVs")

    run = sub.add_parser("run", help="simulate each configured policy and seed")
    sim_args(run)
    run.add_argument("--policy", help="override the policy")
    run.set_defaults(func=cmd_run)

    cmp_ = sub.add_parser("compare", help="run several policies on the identical trace")
    sim_args(cmp_)
    cmp_.add_argument("--policies", help="comma-separated policy list (overrides the config)")
    cmp_.set_defaults(func=cmd_compare)

    val = sub.add_parser("validate", help="run oracle equivalence suites")
    val.add_argument("--suites", help=f"comma-separated subset of {','.join(SUITES)}")
    val.set_defaults(func=cmd_validate)

    gen = sub.add_parser("gen-trace", help="write a synthetic arrival trace")
    gen.add_argument("kind", choices=["ramp", "constant", "bursty"])
    gen.add_argument("--out", required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--duration-min", type=int, required=True)
    for name in ("start-qpm", "end-qpm", "qpm", "low-qpm", "high-qpm", "period-min", "duty"):
        gen.add_argument(f"--{name}", type=float)
    gen.set_defaults(func=cmd_gen_trace)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report and map to the runtime exit code
        log.debug("run failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
