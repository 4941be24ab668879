"""
Noise, denoise, invert
======================

The linear schedule, a deterministic DDIM trajectory, and its exact inverse
under a stand-in noise model.
"""

import numpy as np

from depthvid import schedule as S
from depthvid.pipeline import GenerationRequest, invert_video, sample_latents
from depthvid.tensor import CounterRNG, Tensor

sched = S.linear_schedule()
for t in (1, 250, 500, 1000):
    print(f"alpha_bar({t:4d}) = {sched.alpha_bar(t):.6f}")

# %%
# With the true noise, one DDIM jump lands exactly on the forward marginal.
rng = CounterRNG(0)
z0, eps = rng.normal((4,), np.float64), rng.normal((4,), np.float64)
z700 = S.q_sample(z0, 700, eps, sched)
print(np.allclose(S.ddim_step(z700, eps, 700, 300, sched), S.q_sample(z0, 300, eps, sched)))

# %%
# A model that always predicts zero noise makes inversion a pure rescale.
latents = Tensor(rng.normal((8, 4, 8, 8)))
depth = Tensor(np.zeros((8, 1, 8, 8), np.float32))


def null(z, t, cond):
    return np.zeros_like(z)


inv = invert_video(None, latents, depth, sched, eps_fn=null)
print("scale:", float(inv.noise.data[0, 0, 0, 0] / latents.data[0, 0, 0, 0]), "vs", np.sqrt(sched.alpha_bar(1000)))
back = sample_latents(None, inv.noise, GenerationRequest("", guidance=1.0), depth, sched, eps_fn=null)
print(f"reconstruction MAE: {np.abs(back.data - latents.data).mean():.2e}")
