"""One-shot fine-tuning of the attention projections on a single text-video pair."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .model import (
    ATTENTION_KINDS,
    ConditioningBundle,
    Module,
    UNetConfig,
    VideoDiffusionModel,
    unet_forward,
)
from .scene import RenderedVideo, depth_to_latent, embed_prompt, null_embedding
from .schedule import NoiseSchedule, linear_schedule, predict_z0, q_sample
from .tensor import CounterRNG, NumericalError, ShapeError, Tape, Tensor

log = logging.getLogger(__name__)

FROZEN_KINDS = {"conv", "norm", "embedding", "autoencoder"}


class LedgerError(KeyError):
    """A parameter could not be classified as trainable or frozen."""


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int = 500
    lr: float = 1e-5
    batch_size: int = 1
    temporal_weight: float = 0.1
    cond_dropout: float = 0.1
    seed: int = 0
    guidance_training: bool = True

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.temporal_weight < 0:
            raise ValueError("temporal weight must be >= 0")
        if not 0 <= self.cond_dropout < 1:
            raise ValueError("condition dropout must lie in [0, 1)")
        if self.batch_size != 1:
            raise ValueError("one-shot tuning uses batch size 1")


def select_trainable(model: Module) -> list[tuple[str, bool]]:
    """Classify every parameter.

    Sparse-causal and cross attention tune only ``W_Q``; temporal attention
    tunes all four projections; everything else is frozen.
    """
    out = []
    for name, kind in model.named_kinds():
        if kind.startswith("attn-"):
            attn_kind = kind[len("attn-") :]
            if attn_kind not in ATTENTION_KINDS:
                raise LedgerError(name)
            leaf = name.rsplit(".", 1)[-1]
            out.append((name, leaf == "W_Q" or attn_kind == "temporal"))
        elif kind in FROZEN_KINDS:
            out.append((name, False))
        else:
            raise LedgerError(f"cannot classify parameter {name!r} of kind {kind!r}")
    return out


def apply_trainable(model: Module, trainable: list[tuple[str, bool]]) -> None:
    for name, flag in trainable:
        model.get_parameter(name).requires_grad = flag


def trainable_census(cfg: UNetConfig) -> int:
    """Closed-form count of tuned weights for a U-Net configuration."""
    widths = cfg.widths()
    total = 0
    for level in cfg.attention_levels:
        d = widths[level]
        per_block = 2 * d * cfg.d_k + (3 * d * cfg.d_k + cfg.d_k * d)  # W_Q sc + W_Q cross + temporal
        total += 2 * cfg.num_res_blocks * per_block  # down and up path
    return total


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, params: dict[str, Tensor]) -> None:
        self.step_count += 1
        c1 = 1.0 - self.b1**self.step_count
        c2 = 1.0 - self.b2**self.step_count
        for k, p in params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data = (p.data - p.dtype.type(self.lr) * update).astype(p.dtype)
            p.grad = None


def diffusion_loss(eps, eps_pred) -> Tensor:
    """Mean squared error over all elements."""
    eps = eps if isinstance(eps, Tensor) else Tensor(eps)
    if eps.shape != eps_pred.shape:
        raise ShapeError(f"noise {eps.shape} vs prediction {eps_pred.shape}")
    return T.scale(T.sum_of_squares(T.sub(eps, eps_pred)), 1.0 / eps.size)


def temporal_loss(z0_pred: Tensor) -> Tensor:
    """Sum over consecutive frame pairs of the mean squared difference."""
    f = z0_pred.shape[0]
    if f < 2:
        return Tensor(np.zeros((), z0_pred.dtype))
    diff = T.sub(T.getitem(z0_pred, slice(1, f)), T.getitem(z0_pred, slice(0, f - 1)))
    per_frame = z0_pred.size // f
    return T.scale(T.sum_of_squares(diff), 1.0 / per_frame)


@dataclass
class StepLoss:
    total: float
    diffusion: float
    temporal: float  # weighted contribution to ``total``


def train_step(
    model: VideoDiffusionModel,
    video_latent: Tensor,
    cond: ConditioningBundle,
    schedule: NoiseSchedule,
    config: TrainConfig,
    rng: CounterRNG,
    optimizer: Adam,
    params: dict[str, Tensor],
) -> StepLoss:
    """Draws, in order: timestep, noise, dropout uniform."""
    t = rng.integers(1, schedule.T)
    eps = Tensor(rng.normal(video_latent.shape, video_latent.dtype))
    drop = rng.uniform(1)[0] < config.cond_dropout if config.guidance_training else False
    if drop:
        cond = ConditioningBundle(null_embedding(), cond.depth_latent, is_unconditional=True)
    with Tape() as tape:
        z_t = q_sample(video_latent, t, eps, schedule)
        eps_pred = unet_forward(model.unet, z_t, t, cond)
        l_diff = diffusion_loss(eps, eps_pred)
        if config.temporal_weight > 0:
            l_temp = T.scale(temporal_loss(predict_z0(z_t, eps_pred, t, schedule)), config.temporal_weight)
            total = T.add(l_diff, l_temp)
        else:
            l_temp = None
            total = l_diff
    T.backward(total, tape)
    optimizer.step(params)
    return StepLoss(total.item(), l_diff.item(), 0.0 if l_temp is None else l_temp.item())


@dataclass
class FinetuneResult:
    model: VideoDiffusionModel
    trace: list[StepLoss] = field(default_factory=list)


def encode_video(model: VideoDiffusionModel, video: RenderedVideo) -> tuple[Tensor, Tensor]:
    """Frozen latents and depth latents for a rendered video."""
    latents = model.ae.encode(video.rgb)
    depth = depth_to_latent(video.depth, factor=model.ae.factor)
    return latents, depth


def finetune(
    model: VideoDiffusionModel,
    video: RenderedVideo,
    prompt: str,
    config: TrainConfig,
    schedule: NoiseSchedule | None = None,
) -> FinetuneResult:
    schedule = schedule or linear_schedule()
    latents, depth = encode_video(model, video)
    cond = ConditioningBundle(embed_prompt(prompt), depth)
    trainable = select_trainable(model)
    apply_trainable(model, trainable)
    params = {name: model.get_parameter(name) for name, flag in trainable if flag}
    optimizer = Adam(params, config.lr)
    rng = CounterRNG(config.seed)
    result = FinetuneResult(model)
    for step in range(config.steps):
        try:
            loss = train_step(model, latents, cond, schedule, config, rng, optimizer, params)
        except NumericalError as exc:
            raise TrainingError(f"step {step}: {exc}") from exc
        result.trace.append(loss)
        if step % 50 == 0:
            log.info("step %d loss %.5f (diffusion %.5f)", step, loss.total, loss.diffusion)
    return result


def write_trace(trace: list[StepLoss], path) -> None:
    rows = ["step,loss_total,loss_diffusion,loss_temporal"]
    rows += [f"{i},{r.total:.9g},{r.diffusion:.9g},{r.temporal:.9g}" for i, r in enumerate(trace)]
    Path(path).write_text("\n".join(rows) + "\n")


def read_trace(path) -> list[StepLoss]:
    lines = Path(path).read_text().splitlines()[1:]
    return [StepLoss(*(float(v) for v in line.split(",")[1:])) for line in lines]


def pretrain_autoencoder(
    model: VideoDiffusionModel,
    frames: np.ndarray,
    steps: int = 3000,
    lr: float = 2e-3,
    batch: int = 8,
    seed: int = 0,
) -> list[float]:
    """Fit the autoencoder to ``frames`` ([N, 3, H, W]) by mean absolute reconstruction error.

    The learning rate follows a cosine decay from ``lr`` to zero.
    Afterwards the latent scale is set so encoded latents have unit variance,
    and every autoencoder parameter is frozen.
    """
    ae = model.ae
    params = {name: p for name, p in ae.named_parameters() if name != "latent_scale"}
    for p in params.values():
        p.requires_grad = True
    opt = Adam(params, lr)
    rng = CounterRNG(seed)
    n = frames.shape[0]
    trace = []
    for step in range(steps):
        opt.lr = 0.5 * lr * (1.0 + np.cos(np.pi * step / steps))
        idx = np.sort((rng.uniform(batch) * n).astype(np.int64).clip(0, n - 1))
        x = Tensor(frames[idx])
        with Tape() as tape:
            loss = T.mean(T.tabs(T.sub(ae.decode_raw(ae.encode_raw(x)), x)))
        T.backward(loss, tape)
        opt.step(params)
        trace.append(loss.item())
    for p in params.values():
        p.requires_grad = False
    with T.no_tape():
        z = np.concatenate([ae.encode_raw(Tensor(frames[i : i + 16])).data for i in range(0, n, 16)])
    ae.latent_scale = Tensor(np.array([1.0 / z.std()], np.float32))
    return trace
