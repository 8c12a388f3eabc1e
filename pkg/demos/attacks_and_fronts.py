"""PGD against a model whose worst case is known, then a toy Pareto front.

A two-class linear model has an exact L-infinity worst case: move every
pixel by epsilon against the sign of the weight. PGD should land on it.
The second half sorts random objective triples into fronts and reports
the hypervolume of the first one.
"""

import numpy as np

from tamnas import ops
from tamnas.adversarial import AttackSpec, pgd_attack
from tamnas.engine import Tensor
from tamnas.nsga import crowding_distance, fast_nondominated_sort, hypervolume

rng = np.random.default_rng(1)
w = rng.standard_normal(12)
x = rng.uniform(0.2, 0.8, (1, 12)).astype(np.float32)
weights = np.stack([np.zeros_like(w), w], axis=1).astype(np.float32)


def model(xt):
    return ops.matmul(xt, Tensor(weights))  # logits (0, w.x)


for eps in (2 / 255, 8 / 255):
    adv = pgd_attack(model, x, np.array([1]), AttackSpec(epsilon=eps, steps=10), rng)
    exact = np.clip(x - eps * np.sign(w), 0, 1)
    print(f"eps {eps * 255:.0f}/255: margin {float((x @ w)[0]):+.3f} -> {float((adv @ w)[0]):+.3f}, "
          f"max distance to exact worst case {np.abs(adv - exact).max():.1e}")

pts = rng.uniform(0, 1, (30, 3))
fronts = fast_nondominated_sort(pts)
print(f"\n30 random points fall into {len(fronts)} fronts of sizes {[len(f) for f in fronts]}")
first = pts[fronts[0]]
print("first-front crowding:", np.round(crowding_distance(first), 3))
print(f"hypervolume of the first front w.r.t. (1, 1, 1): {hypervolume(first, (1, 1, 1)):.4f}")
print(f"adding a dominated point changes nothing: {hypervolume(np.vstack([first, [0.99] * 3]), (1, 1, 1)):.4f}")
