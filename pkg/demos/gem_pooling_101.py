"""
Generalized-mean pooling between average and max
================================================

GeM pools each feature map with a power mean.  The exponent slides the
result from the map average (p = 1) to the map maximum (p -> inf), and it is
differentiable in both the activations and p.
"""

import numpy as np

from gemret import PoolingConfig, gem_pool, mac_pool, spoc_pool
from gemret.gradcheck import run_all

# a single 2x2 feature map holding 1, 2, 3, 4
x = np.array([[1.0, 2.0], [3.0, 4.0]])[:, :, None]
print("average", spoc_pool(x), "max", mac_pool(x))

# the power mean climbs from 2.5 toward 4 as p grows
for p in (1, 2, 3, 8, 32, 1e4):
    print(f"p={p:<7g} GeM={gem_pool(x, PoolingConfig.gem(p))[0]:.6f}")

# with several maps, each can carry its own exponent
rng = np.random.default_rng(0)
acts = rng.uniform(0, 5, size=(7, 7, 4))
per_map = PoolingConfig.gem(3.0, per_map=4)
per_map.exponents[:] = [1.0, 2.0, 4.0, 50.0]
print("per-map GeM", np.round(gem_pool(acts, per_map), 3))
print("average    ", np.round(spoc_pool(acts), 3))
print("max        ", np.round(mac_pool(acts), 3))

# the analytic gradients agree with central finite differences
for r in run_all(seed=0, instances=10):
    print(f"{r.name:12s} max relative error {r.max_rel_error:.1e}")
