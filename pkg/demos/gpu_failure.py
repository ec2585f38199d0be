"""
Losing half the cluster for ten minutes
========================================

Workers 0-3 go down at 15 minutes and come back at 25. In-flight and queued
prompts on the dead workers are requeued, the next resolve tick re-plans on
the survivors, and quality recovers once capacity returns.
"""

import numpy as np

from approxsched.simulator import Fault, FaultScript, Policy, SimConfig, simulate
from approxsched.workload import gen_constant

trace = gen_constant(80, 40, seed=3)
faults = FaultScript((Fault(900, 1500, "gpu_down", (0, 1, 2, 3)),))
res = simulate(SimConfig(), trace, faults, Policy.PROMPT_AWARE, seed=3)

for plan in res.plans:
    if 840 <= plan.time_s <= 1620:
        print(f"t={plan.time_s:5.0f}s alive={plan.n_alive} feasible={plan.feasible} {dict(sorted(plan.counts.items()))}")

rq = res.report.column("relative_quality_pct")
util = res.report.column("utilization_pct")
print("\nminute  rel_quality  util")
for m in range(12, 29):
    print(f"{m:6d}  {rq[m]:11.2f}  {util[m]:5.1f}")
print(f"\nunfinished prompts at end of drain: {res.n_unfinished}")
print("mean relative quality before / during / after:",
      np.round([rq[5:15].mean(), rq[16:25].mean(), rq[27:40].mean()], 2))
