"""
Five placement policies on the same load ramp
==============================================

Eight workers, 10 to 200 prompts per minute over an hour. Every policy sees
the identical arrival trace and prompt population.
"""

from approxsched.cli import HEADER, summary_row
from approxsched.simulator import Policy, SimConfig, simulate
from approxsched.workload import gen_ramp

trace = gen_ramp(10, 200, 60, seed=1)
print(f"{len(trace)} arrivals, checksum {trace.checksum()}\n")

results = {p: simulate(SimConfig(), trace, policy=p, seed=1) for p in Policy}
print(HEADER)
for p, r in results.items():
    print(summary_row(p.value, r))

# Where did the adaptive policy spend its capacity as load grew?
print("\nplan per resolve tick (prompt_aware):")
for plan in results[Policy.PROMPT_AWARE].plans[::6]:
    mix = ", ".join(f"{v}x{n}" for v, n in sorted(plan.counts.items()))
    print(f"  t={plan.time_s:6.0f}s  W_t={plan.w_t:6.1f}  {mix}")

# Per-minute quality, first and last ten minutes.
q = results[Policy.PROMPT_AWARE].report.column("effective_quality")
print("\neffective quality, early:", q[:10].round(2))
print("effective quality, late: ", q[-10:].round(2))
