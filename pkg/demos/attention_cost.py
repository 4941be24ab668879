"""
What sparse-causal attention saves
==================================

Closed-form multiply-accumulate counts for dense spatio-temporal attention,
sparse-causal attention and temporal attention as the clip gets longer.
"""

import numpy as np

from depthvid.pipeline import bench_attention

rows = bench_attention(range(2, 17, 2), tokens=64, dim=64, timed=True)
print(f"{'frames':>6} {'full':>12} {'sparse':>12} {'temporal':>10}  ratio")
by_mode = {}
for r in rows:
    by_mode.setdefault(r.mode, []).append(r)
for full, sparse, temp in zip(by_mode["full"], by_mode["sparse-causal"], by_mode["temporal"]):
    print(f"{full.frames:6d} {full.flops:12d} {sparse.flops:12d} {temp.flops:10d}  {full.flops / sparse.flops:5.1f}x")

# %%
# Dense cost grows with the square of the frame count, sparse cost linearly.
f = np.array([r.frames for r in by_mode["full"]], float)
full = np.array([r.flops for r in by_mode["full"]], float)
print("quadratic fit coefficients (full):", np.polyfit(f, full, 2).round(1))
