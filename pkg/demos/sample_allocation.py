"""
Splitting K samples across modes
================================

Each mode receives the floor of its share of K; the samples left over go to
the largest fractional parts.
"""

import numpy as np

from hlsf.infer import allocate_samples

for w, K in [((0.5, 0.3, 0.2), 15), ((1.0, 0.0, 0.0), 15), ((0.25,) * 4, 6), ((0.9, 0.1), 1)]:
    print(w, K, "->", allocate_samples(w, K).counts)

# plain floors rarely add up to K
rng = np.random.default_rng(0)
short = 0
for _ in range(1000):
    w = rng.dirichlet(np.ones(5))
    short += int(np.floor(15 * w).sum()) < 15
print(f"floors alone fall short of K=15 in {short} of 1000 random weight vectors")
