"""Greedy versus exact merging of scoped segment columns.

Run: python3 demos/02_merge_solvers.py
"""

import numpy as np

from primcascade import merge as mg

# Four columns: a1 and a2 come from one scope, b1 and c1 from two others.
# Greedy takes the single largest overlap (a1, b1) first; after that b1 can no
# longer join c1, because c1 already sits with a2 from a1's scope.
a1, a2, b1, c1 = range(4)
overlap = np.zeros((4, 4))
for i, j, v in [(a1, b1, 10), (a2, b1, 9), (a2, c1, 9), (b1, c1, 9)]:
    overlap[i, j] = overlap[j, i] = v
scope = [0, 0, 1, 2]

greedy = mg.greedy_merge(overlap, scope)
exact = mg.exact_merge(overlap, scope)
print("greedy groups", greedy.groups, "objective", greedy.objective)
print("exact  groups", exact.groups, "objective", exact.objective, exact.status)

# On benchmark instances the gap is usually small.
rng = np.random.default_rng(0)
ratios = []
for _ in range(200):
    inst = mg.random_instance(int(rng.integers(2, 13)), rng)
    ratios.append(mg.greedy_merge(inst).objective / mg.exact_merge(inst).objective)
ratios = np.array(ratios)
print(f"200 instances: mean greedy/exact {ratios.mean():.4f},"
      f" greedy optimal in {np.mean(ratios >= 1 - 1e-12):.0%}")

# Past the column limit the exact solver declines instead of running forever.
print(mg.exact_merge(mg.random_instance(20, rng)).status)
