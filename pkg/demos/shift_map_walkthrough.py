"""
Routing prompts when the plan disagrees with demand
====================================================

Prompts arrive with a predicted best variant, distributed as H. The
allocator hands back a capacity split F that usually differs from H. The
shift map moves the surplus of each over-subscribed variant to the nearest
under-subscribed one, so that routed traffic lands on F exactly.
"""

import numpy as np

from approxsched.catalog import Strategy, build_catalog, degradation_table
from approxsched.oda import compute_pasm, expected_degradation, min_degradation_oracle, pushforward

np.set_printoptions(precision=4, suppress=True)

# Two levels first. 70% of prompts want the slow variant, but capacity is split evenly.
h, f = [0.7, 0.3], [0.5, 0.5]
p = compute_pasm(h, f)
print("two levels, H=", h, "F=", f)
print(p.matrix)
# the excess 0.2 of slow-preferring traffic moves one step faster
print("pushforward:", pushforward(p, h))

# Now the default AC catalog with a mismatched histogram.
cat = build_catalog()
ids = cat.ids(Strategy.AC)
h = np.array([0.25, 0.10, 0.10, 0.15, 0.15, 0.25])
f = np.array([0.0, 0.0, 0.375, 0.375, 0.25, 0.0])
p = compute_pasm(h, f, ids)
print("\nAC levels:", ids)
print(p.matrix)
print("pushforward matches F:", np.allclose(pushforward(p, h), f))

# How much quality did that cost, and could any transport plan do better?
d = degradation_table(cat, Strategy.AC)
got = expected_degradation(p, h, d)
_, best = min_degradation_oracle(h, f, d)
print(f"expected degradation {got:.4f}, transport LP optimum {best:.4f}")
