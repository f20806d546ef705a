"""
Searching a keyframe set
========================

Gate logits theta_n decide whether iteration n refreshes its features. The
gates are rounded in the forward pass and pass gradients straight through,
so the whole sampling trajectory can be optimized against the full-compute
sample plus a penalty on open gates.
"""

import numpy as np

from frdiff.autofr import AutoFRConfig, autofr_search
from frdiff.network import build_toy_network
from frdiff.schedule import NoiseSchedule

net = build_toy_network("toy_dit", width=16, depth=2, seed=0)
schedule = NoiseSchedule.linear()

for lam in (0.0, 1e-2, 1e-1):
    res = autofr_search(net, schedule, AutoFRConfig(steps=12, iterations=20, batch=2, cost_lambda=lam))
    print(f"cost_lambda={lam:g}  |K|={len(res.keyframes):2d}  mse={res.final_mse:.2e}  K={res.keyframes.to_list()}")

print("final logits:", np.round(res.gates.theta, 2))
