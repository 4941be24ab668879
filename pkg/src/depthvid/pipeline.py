"""Inversion-guided generation, surrogate evaluation metrics and the attention benchmark."""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass

import numpy as np

from .model import (
    TEMPORAL,
    SPARSE_CAUSAL,
    AttentionParams,
    Autoencoder,
    ConditioningBundle,
    VideoDiffusionModel,
    attention_flops,
    full_attention,
    sparse_causal_attention,
    temporal_self_attention,
    unet_forward,
)
from .scene import FIXTURE_NAMES, embed_prompt, load_fixture, null_embedding, render
from .schedule import NoiseSchedule, ddim_invert_step, ddim_step, ddim_timesteps, linear_schedule
from .tensor import CounterRNG, Tensor


@dataclass
class InversionResult:
    noise: Tensor  # [F, C, H, W]
    timesteps: list[int]
    prompt_hash: str
    model_checksum: str


@dataclass
class GenerationRequest:
    prompt: str
    guidance: float = 7.5
    ddim_steps: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.guidance < 0:
            raise ValueError("guidance scale must be >= 0")


def prompt_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def _eps_model(model: VideoDiffusionModel):
    def eps(z: np.ndarray, t: int, cond: ConditioningBundle) -> np.ndarray:
        return unet_forward(model.unet, Tensor(z), t, cond).data

    return eps


def invert_video(
    model: VideoDiffusionModel,
    latents: Tensor,
    depth: Tensor,
    schedule: NoiseSchedule | None = None,
    ddim_steps: int = 50,
    source_prompt: str = "",
    eps_fn=None,
) -> InversionResult:
    """Null-text DDIM inversion from the clean latents up to ``T``.

    The noise for the step ``t -> t_next`` is predicted at ``(z_t, t_next)``.
    ``eps_fn(z, t, cond)`` overrides the U-Net (used for stub models).
    """
    schedule = schedule or linear_schedule()
    steps = ddim_timesteps(schedule.T, ddim_steps)
    eps_fn = eps_fn or _eps_model(model)
    cond = ConditioningBundle(null_embedding(), depth, is_unconditional=True)
    z = latents.data.copy()
    t = 0
    for t_next in steps:
        z = ddim_invert_step(z, eps_fn(z, t_next, cond), t, t_next, schedule)
        t = t_next
    checksum = model.checksum() if model is not None else ""
    return InversionResult(Tensor(z), steps, prompt_hash(source_prompt), checksum)


def cfg_combine(eps_uncond, eps_cond, s: float):
    """``eps_uncond + s (eps_cond - eps_uncond)``; exact at ``s`` of 0 and 1."""
    u = np.asarray(eps_uncond.data if isinstance(eps_uncond, Tensor) else eps_uncond)
    c = np.asarray(eps_cond.data if isinstance(eps_cond, Tensor) else eps_cond)
    if u.shape != c.shape:
        raise ValueError(f"shape mismatch {u.shape} vs {c.shape}")
    if s == 0:
        return u.copy()
    if s == 1:
        return c.copy()
    return u + u.dtype.type(s) * (c - u)


def sample_latents(
    model: VideoDiffusionModel,
    init_noise: Tensor,
    request: GenerationRequest,
    depth: Tensor,
    schedule: NoiseSchedule | None = None,
    eps_fn=None,
) -> Tensor:
    """Descending DDIM traversal with classifier-free guidance."""
    schedule = schedule or linear_schedule()
    steps = ddim_timesteps(schedule.T, request.ddim_steps)
    eps_fn = eps_fn or _eps_model(model)
    cond = ConditioningBundle(embed_prompt(request.prompt), depth)
    uncond = ConditioningBundle(null_embedding(), depth, is_unconditional=True)
    s = request.guidance
    z = init_noise.data.copy()
    for i in reversed(range(len(steps))):
        t = steps[i]
        t_prev = steps[i - 1] if i > 0 else 0
        e_u = eps_fn(z, t, uncond) if s != 1 else None
        e_c = eps_fn(z, t, cond) if s != 0 else None
        eps = cfg_combine(e_u if e_u is not None else e_c, e_c if e_c is not None else e_u, s)
        z = ddim_step(z, eps, t, t_prev, schedule)
    return Tensor(z)


def generate(
    model: VideoDiffusionModel,
    init_noise: Tensor,
    request: GenerationRequest,
    depth: Tensor,
    schedule: NoiseSchedule | None = None,
) -> Tensor:
    """Sample latents from ``init_noise`` and decode them to ``[F, 3, H, W]`` frames."""
    return model.ae.decode(sample_latents(model, init_noise, request, depth, schedule))


def fresh_noise(shape, seed: int) -> Tensor:
    """Gaussian starting point for the no-inversion ablation."""
    return Tensor(CounterRNG(seed).normal(shape))


# ---------------------------------------------------------------------------
# surrogate metrics


@dataclass
class EvalReport:
    consistency: float
    matrix: np.ndarray
    alignment: float | None = None

    def to_csv(self) -> str:
        rows = ["metric,value", f"frame_consistency,{self.consistency:.9g}"]
        if self.alignment is not None:
            rows.append(f"textual_alignment,{self.alignment:.9g}")
        rows.append("pair_i,pair_j,cosine")
        n = self.matrix.shape[0]
        rows += [f"{i},{j},{self.matrix[i, j]:.9g}" for i in range(n) for j in range(i + 1, n)]
        return "\n".join(rows) + "\n"


def frame_embeddings(ae: Autoencoder, frames: Tensor) -> np.ndarray:
    """Unit vectors from the latent average-pooled onto a 2x2 grid, ``[F, 4 C]``."""
    z = ae.encode(frames).data.astype(np.float64)
    f, c, h, w = z.shape
    pooled = z.reshape(f, c, 2, h // 2, 2, w // 2).mean(axis=(3, 5)).reshape(f, -1)
    return pooled / np.maximum(np.linalg.norm(pooled, axis=1, keepdims=True), 1e-12)


def frame_consistency(ae: Autoencoder, frames: Tensor) -> EvalReport:
    if frames.shape[0] < 2:
        raise ValueError("frame consistency needs at least two frames")
    emb = frame_embeddings(ae, frames)
    sim = emb @ emb.T
    iu = np.triu_indices(len(emb), k=1)
    return EvalReport(float(sim[iu].mean()), sim)


def prompt_vector(text: str) -> np.ndarray:
    return embed_prompt(text).data.astype(np.float64).mean(axis=0)


def fit_text_projection(ae: Autoencoder, fixtures=FIXTURE_NAMES) -> np.ndarray:
    """Least-squares map from pooled prompt embeddings to mean frame embeddings."""
    xs, ys = [], []
    for name in fixtures:
        video = render(load_fixture(name))
        xs.append(prompt_vector(video.prompt))
        ys.append(frame_embeddings(ae, video.rgb).mean(axis=0))
    proj, *_ = np.linalg.lstsq(np.array(xs), np.array(ys), rcond=None)
    return proj


def textual_alignment(ae: Autoencoder, frames: Tensor, prompt: str, projection: np.ndarray | None = None) -> float:
    """Mean cosine between frame embeddings and the projected prompt (weak proxy)."""
    if not prompt.strip():
        raise ValueError("textual alignment needs a non-empty prompt")
    projection = fit_text_projection(ae) if projection is None else projection
    target = prompt_vector(prompt) @ projection
    target = target / max(np.linalg.norm(target), 1e-12)
    return float(np.clip(frame_embeddings(ae, frames) @ target, -1.0, 1.0).mean())


def consecutive_distance(latents: Tensor) -> float:
    """Mean squared difference between consecutive latent frames."""
    z = latents.data.astype(np.float64)
    return float(((z[1:] - z[:-1]) ** 2).mean())


# ---------------------------------------------------------------------------
# attention benchmark

_KERNELS = {"full": full_attention, SPARSE_CAUSAL: sparse_causal_attention, TEMPORAL: temporal_self_attention}


@dataclass
class BenchRow:
    mode: str
    frames: int
    tokens: int
    dim: int
    flops: int
    wall_ns: int


def bench_attention(frames: range, tokens: int, dim: int, seed: int = 0, timed: bool = True) -> list[BenchRow]:
    """Closed-form multiply-accumulate counts (and kernel wall time) per mode and frame count.

    Token grids are ``1 x tokens`` so any token count works.
    """
    rows = []
    for mode, kernel in _KERNELS.items():
        kind = TEMPORAL if mode == TEMPORAL else SPARSE_CAUSAL
        params = AttentionParams(kind, dim, dim, CounterRNG(seed))
        for f in frames:
            macs = attention_flops(f, tokens, dim, mode).total
            wall = 0
            if timed:
                z = Tensor(CounterRNG(seed + f).normal((f, dim, 1, tokens)))
                start = time.perf_counter_ns()
                kernel(z, params)
                wall = time.perf_counter_ns() - start
            rows.append(BenchRow(mode, f, tokens, dim, macs, wall))
    return rows


def bench_csv(rows: list[BenchRow]) -> str:
    lines = ["mode,frames,tokens,dim,flops,wall_ns"]
    lines += [f"{r.mode},{r.frames},{r.tokens},{r.dim},{r.flops},{r.wall_ns}" for r in rows]
    return "\n".join(lines) + "\n"
