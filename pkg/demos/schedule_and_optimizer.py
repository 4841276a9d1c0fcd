"""
Warmup, cosine decay and AdamW
==============================

The learning rate climbs linearly, then follows half a cosine down to zero.
Weight decay is applied to the weights directly, outside the adaptive step.
"""

import numpy as np

from qfl.optim import OptimizerState, adamw_step, lr_at

total, warmup, peak = 100, 10, 1e-3
for step in (0, 5, 10, 25, 50, 75, 99):
    print(f"step {step:3d}  lr {lr_at(step, warmup, total, peak):.2e}")

# minimise a quadratic bowl; with a zero gradient only decay moves the weights
params = {"w": np.array([3.0, -2.0])}
state = OptimizerState()
for step in range(total):
    params, state = adamw_step(params, {"w": 2 * params["w"]}, state, lr_at(step, warmup, total, 0.1))
print("after AdamW on |w|^2:", params["w"])
still, _ = adamw_step({"w": np.array([1.0])}, {"w": np.zeros(1)}, OptimizerState(), 0.1, weight_decay=0.5)
print("decay only, lr 0.1, wd 0.5:", still["w"])
