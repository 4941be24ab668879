"""
One-shot edit of a synthetic clip
=================================

Render a fixture, train the autoencoder, tune the attention projections on
that single clip, invert it, and regenerate it under an edited prompt.

The U-Net starts from random weights, so the edited clip shows the mechanics
of the pipeline rather than a faithful edit. Expect a few minutes on a laptop.
"""

import sys
from pathlib import Path

import numpy as np

from depthvid import pipeline, scene, train
from depthvid.model import VideoDiffusionModel

out = Path(sys.argv[1] if len(sys.argv) > 1 else "one_shot_out")
fast = "--fast" in sys.argv

video = scene.render(scene.load_fixture("two_circle_crossing"))
scene.save_video(video, out / "source", contact_sheet=True)
print("source prompt:", video.prompt)

# %%
# Autoencoder on the fixtures plus a few random scenes.
frames = [scene.render(scene.load_fixture(n)).rgb.data for n in scene.FIXTURE_NAMES]
frames += [scene.render(scene.random_scene(1000 + s)).rgb.data for s in range(24)]
model = VideoDiffusionModel()
losses = train.pretrain_autoencoder(model, np.concatenate(frames), steps=300 if fast else 3000)
print(f"autoencoder L1: {losses[0]:.3f} -> {losses[-1]:.3f}")

# %%
# Tune only the attention projections on the one clip.
cfg = train.TrainConfig(steps=50 if fast else 500)
result = train.finetune(model, video, video.prompt, cfg)
d = [r.diffusion for r in result.trace]
print(f"diffusion loss, first/last 10 steps: {np.mean(d[:10]):.3f} / {np.mean(d[-10:]):.3f}")

# %%
# Invert the source, then sample with an edited prompt.
latents, depth = train.encode_video(model, video)
inv = pipeline.invert_video(model, latents, depth, ddim_steps=10 if fast else 50, source_prompt=video.prompt)
request = pipeline.GenerationRequest("a red ball and a green ball cross paths", ddim_steps=10 if fast else 50)
edited = pipeline.generate(model, inv.noise, request, depth)
scene.save_frames(edited.data, out / "edited")

report = pipeline.frame_consistency(model.ae, edited)
print(f"edited frame consistency: {report.consistency:.3f}")
print("contact sheets in", out)
