"""One LHC block on a random feature map, with every intermediate printed.

Run: python3 demos/01_lhc_block.py
"""

import numpy as np

from lhcnet.attention import BranchTrace, LhcConfig, LhcWeights, lhc_branch, lhc_forward
from lhcnet.tensor import Tensor

cfg = LhcConfig(n=4, d=8, p=3, s=3, g=1.0, input_shape=(8, 8, 6))
wts = LhcWeights.init(cfg, seed=0)
x = Tensor(np.random.default_rng(0).normal(size=cfg.input_shape))

trace = BranchTrace()
branch = lhc_branch(x, cfg, wts, trace)
print(f"input {x.shape}, {cfg.n} heads of {cfg.channels} x {cfg.head_size}, {cfg.n_params} parameters")
for i, (scale, weights) in enumerate(zip(trace.scales, trace.weights), start=1):
    w = weights.numpy()
    print(f"head {i}: temperature in [{scale.numpy().min():.3f}, {scale.numpy().max():.3f}], "
          f"peak attention weight {w.max():.3f}, rows sum to {w.sum(axis=-1).min():.6f}")

y = lhc_forward(x, cfg, wts)
print(f"output {y.shape}; residual check: {np.allclose(y.numpy(), x.numpy() + branch.numpy())}")
