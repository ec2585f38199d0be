"""
When the cache gets slow
=========================

Approximate caching needs a retrieval before each prompt. If retrievals get
ten times slower the cached variants stop paying off. The controller notices
the inflated retrieval latency, moves the cluster to the small-model ladder,
probes the cache every 30 s, and moves back once it is healthy.
"""

import dataclasses

from approxsched.scheduler import SchedulerConfig
from approxsched.simulator import Fault, FaultScript, Policy, SimConfig, simulate
from approxsched.workload import gen_constant

trace = gen_constant(150, 40, seed=3)
faults = FaultScript((Fault(600, 1800, "retrieval_degraded", multiplier=10),))

on = simulate(SimConfig(), trace, faults, Policy.PROMPT_AWARE, seed=3)
off = simulate(SimConfig(scheduler=dataclasses.replace(SchedulerConfig(), enable_switching=False)),
               trace, faults, Policy.PROMPT_AWARE, seed=3)

print("mode transitions:")
for t, old, new in on.switches:
    print(f"  t={t:8.2f}s  {old} -> {new}")

v_on = on.report.column("slo_violation_ratio")
v_off = off.report.column("slo_violation_ratio")
print("\nminute  viol(switching)  viol(fixed)")
for m in range(8, 34, 2):
    print(f"{m:6d}  {v_on[m]:15.3f}  {v_off[m]:11.3f}")
print(f"\naggregate violation ratio: {on.report.aggregate.slo_violation_ratio:.3f} "
      f"vs {off.report.aggregate.slo_violation_ratio:.3f} without switching")
