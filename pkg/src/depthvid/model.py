"""Latent autoencoder and pseudo-3D denoising U-Net.

Latent videos are ``[F, C, H, W]`` tensors; spatial layers treat ``F`` as a
batch axis so no weights mix frames. Cross-frame information enters only
through the sparse-causal and temporal attention layers.
"""

from __future__ import annotations

import contextlib
import copy
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import CounterRNG, ShapeError, Tensor

SPARSE_CAUSAL = "sparse-causal"
TEMPORAL = "temporal"
CROSS = "cross"
ATTENTION_KINDS = (SPARSE_CAUSAL, TEMPORAL, CROSS)


class ContractError(ValueError):
    pass


# ---------------------------------------------------------------------------
# module plumbing


class Module:
    kind = "module"

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def named_kinds(self, prefix: str = "") -> Iterator[tuple[str, str]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                yield prefix + name, self.kind
            elif isinstance(value, Module):
                yield from value.named_kinds(f"{prefix}{name}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_kinds(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def _owner(self, name: str) -> tuple[object, str]:
        *path, leaf = name.split(".")
        obj: object = self
        for part in path:
            obj = obj[int(part)] if isinstance(obj, list) else getattr(obj, part)
        return obj, leaf

    def get_parameter(self, name: str) -> Tensor:
        obj, leaf = self._owner(name)
        return getattr(obj, leaf)

    def set_parameter(self, name: str, value: Tensor) -> None:
        obj, leaf = self._owner(name)
        if not isinstance(getattr(obj, leaf, None), Tensor):
            raise KeyError(name)
        setattr(obj, leaf, value)

    @contextlib.contextmanager
    def swapped(self, name: str, value: Tensor):
        old = self.get_parameter(name)
        self.set_parameter(name, value)
        try:
            yield
        finally:
            self.set_parameter(name, old)

    def astype(self, dtype):
        clone = copy.deepcopy(self)
        for name, p in clone.named_parameters():
            clone.set_parameter(name, Tensor(p.data.astype(dtype), requires_grad=p.requires_grad))
        return clone


def _normal(rng: CounterRNG, shape, std: float) -> Tensor:
    return Tensor(rng.normal(shape) * np.float32(std))


class Conv(Module):
    """Image convolution ``[Co, Ci, k, k]``."""

    kind = "conv"

    def __init__(self, ci: int, co: int, rng: CounterRNG, k: int = 3, stride: int = 1):
        self.weight = _normal(rng, (co, ci, k, k), 1.0 / math.sqrt(ci * k * k))
        self.bias = Tensor(np.zeros(co, np.float32))
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride)


class Conv3d(Module):
    """Inflated convolution with ``[Co, Ci, 1, k, k]`` kernels."""

    kind = "conv"

    def __init__(self, ci: int, co: int, rng: CounterRNG, k: int = 3, stride: int = 1):
        self.weight = _normal(rng, (co, ci, 1, k, k), 1.0 / math.sqrt(ci * k * k))
        self.bias = Tensor(np.zeros(co, np.float32))
        self.stride = stride

    def __call__(self, z: Tensor) -> Tensor:
        return pseudo3d_conv(z, self.weight, self.bias, stride=self.stride)


class GroupNorm(Module):
    kind = "norm"

    def __init__(self, channels: int, groups: int):
        self.gamma = Tensor(np.ones(channels, np.float32))
        self.beta = Tensor(np.zeros(channels, np.float32))
        self.groups = groups

    def __call__(self, x: Tensor) -> Tensor:
        return T.group_norm(x, self.groups, self.gamma, self.beta)


class TimeMLP(Module):
    kind = "embedding"

    def __init__(self, d_in: int, d_out: int, rng: CounterRNG):
        self.w1 = _normal(rng, (d_in, d_out), 1.0 / math.sqrt(d_in))
        self.b1 = Tensor(np.zeros(d_out, np.float32))
        self.w2 = _normal(rng, (d_out, d_out), 1.0 / math.sqrt(d_out))
        self.b2 = Tensor(np.zeros(d_out, np.float32))

    def __call__(self, emb: Tensor) -> Tensor:
        h = T.silu(T.add(T.matmul(emb, self.w1), self.b1))
        return T.add(T.matmul(h, self.w2), self.b2)


def pseudo3d_conv(z: Tensor, kernels: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Apply a ``1 x k x k`` kernel to every frame of ``[F, C, H, W]`` with shared weights."""
    if kernels.ndim != 5 or kernels.shape[2] != 1:
        raise ShapeError(f"pseudo-3D kernel must be [Co, Ci, 1, k, k], got {kernels.shape}")
    co, ci, _, k, _ = kernels.shape
    return T.conv2d(z, T.reshape(kernels, (co, ci, k, k)), bias, stride=stride)


# ---------------------------------------------------------------------------
# attention


class AttentionParams(Module):
    """Projection matrices of one attention block.

    ``W_Q: [d, d_k]``, ``W_K, W_V: [d_ctx, d_k]``, ``W_O: [d_k, d]``.
    """

    def __init__(self, kind: str, d: int, d_k: int, rng: CounterRNG, d_ctx: int | None = None, zero_out: bool = False):
        if kind not in ATTENTION_KINDS:
            raise ContractError(f"unknown attention kind {kind!r}")
        d_ctx = d if d_ctx is None else d_ctx
        self.attn_kind = kind
        self.W_Q = _normal(rng, (d, d_k), 1.0 / math.sqrt(d))
        self.W_K = _normal(rng, (d_ctx, d_k), 1.0 / math.sqrt(d_ctx))
        self.W_V = _normal(rng, (d_ctx, d_k), 1.0 / math.sqrt(d_ctx))
        self.W_O = Tensor(np.zeros((d_k, d), np.float32)) if zero_out else _normal(rng, (d_k, d), 1.0 / math.sqrt(d_k))

    @property
    def kind(self) -> str:  # type: ignore[override]
        return f"attn-{self.attn_kind}"

    @property
    def trainable_mask(self) -> dict[str, bool]:
        if self.attn_kind == TEMPORAL:
            return {"W_Q": True, "W_K": True, "W_V": True, "W_O": True}
        return {"W_Q": True, "W_K": False, "W_V": False, "W_O": False}


def _expect(params: AttentionParams, kind: str) -> None:
    if params.attn_kind != kind:
        raise ContractError(f"expected {kind} attention params, got {params.attn_kind}")


def _tokens(z: Tensor) -> Tensor:
    f, c, h, w = z.shape
    return T.transpose(T.reshape(z, (f, c, h * w)), (0, 2, 1))  # [F, N, C]


def _untokens(x: Tensor, shape) -> Tensor:
    f, c, h, w = shape
    return T.reshape(T.transpose(x, (0, 2, 1)), (f, c, h, w))


def _attend(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    d_k = q.shape[-1]
    scores = T.scale(T.matmul(q, T.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))), 1.0 / math.sqrt(d_k))
    return T.matmul(T.softmax(scores, axis=-1), v)


def sparse_causal_attention(z: Tensor, params: AttentionParams) -> Tensor:
    """Frame ``i`` attends to frames ``{0, i-1}`` (0-based); frames 0 and 1 see frame 0 only."""
    _expect(params, SPARSE_CAUSAL)
    f = z.shape[0]
    x = _tokens(z)
    q = T.matmul(x, params.W_Q)
    k = T.matmul(x, params.W_K)
    v = T.matmul(x, params.W_V)
    head = min(f, 2)
    k0, v0 = T.getitem(k, slice(0, 1)), T.getitem(v, slice(0, 1))
    out = _attend(T.getitem(q, slice(0, head)), k0, v0)
    if f > 2:
        first = [0] * (f - 2)
        prev = list(range(1, f - 1))
        kk = T.concat([T.take(k, first), T.take(k, prev)], axis=1)
        vv = T.concat([T.take(v, first), T.take(v, prev)], axis=1)
        out = T.concat([out, _attend(T.getitem(q, slice(2, f)), kk, vv)], axis=0)
    return T.add(z, _untokens(T.matmul(out, params.W_O), z.shape))


def full_attention(z: Tensor, params: AttentionParams) -> Tensor:
    """Dense attention over all ``F*H*W`` tokens (complexity baseline)."""
    f, c, h, w = z.shape
    x = T.reshape(_tokens(z), (1, f * h * w, c))
    out = _attend(T.matmul(x, params.W_Q), T.matmul(x, params.W_K), T.matmul(x, params.W_V))
    y = T.reshape(T.matmul(out, params.W_O), (f, h * w, c))
    return T.add(z, _untokens(y, z.shape))


def temporal_self_attention(z: Tensor, params: AttentionParams) -> Tensor:
    """Attention across frames independently at each spatial location."""
    _expect(params, TEMPORAL)
    f, c, h, w = z.shape
    x = T.transpose(T.reshape(z, (f, c, h * w)), (2, 0, 1))  # [N, F, C]
    out = _attend(T.matmul(x, params.W_Q), T.matmul(x, params.W_K), T.matmul(x, params.W_V))
    y = T.matmul(out, params.W_O)  # [N, F, C]
    return T.add(z, T.reshape(T.transpose(y, (1, 2, 0)), (f, c, h, w)))


def cross_attention(z: Tensor, text: Tensor, params: AttentionParams) -> Tensor:
    """Latent tokens query the text tokens ``[L, d_text]``, per frame."""
    _expect(params, CROSS)
    if text.ndim != 2 or text.shape[1] != params.W_K.shape[0]:
        raise ShapeError(f"text embedding {text.shape} does not match W_K {params.W_K.shape}")
    x = _tokens(z)
    q = T.matmul(x, params.W_Q)
    out = _attend(q, T.matmul(text, params.W_K), T.matmul(text, params.W_V))
    return T.add(z, _untokens(T.matmul(out, params.W_O), z.shape))


@dataclass(frozen=True)
class AttentionCost:
    attention: int  # QK^T plus AV multiply-accumulates
    projection: int  # Q, K, V, O projections

    @property
    def total(self) -> int:
        return self.attention + self.projection


def attention_flops(frames: int, tokens: int, d: int, mode: str) -> AttentionCost:
    """Exact multiply-accumulate counts of the attention kernels in this module.

    ``d`` is used for both the model width and the key width.
    """
    if min(frames, tokens, d) < 1:
        raise ValueError("attention_flops arguments must be positive")
    n = tokens
    if mode == "full":
        attn = (frames * n) ** 2 * 2 * d
    elif mode == SPARSE_CAUSAL:
        keys = [n if i < 2 else 2 * n for i in range(frames)]
        attn = sum(n * k * 2 * d for k in keys)
    elif mode == TEMPORAL:
        attn = n * frames**2 * 2 * d
    else:
        raise ValueError(f"unknown attention mode {mode!r}")
    return AttentionCost(attention=attn, projection=4 * frames * n * d * d)


# ---------------------------------------------------------------------------
# U-Net


@dataclass(frozen=True)
class UNetConfig:
    base_width: int = 32
    channel_mults: tuple[int, ...] = (1, 2)
    num_res_blocks: int = 1
    attention_levels: tuple[int, ...] = (0,)
    d_k: int = 32
    latent_channels: int = 4
    depth_channels: int = 1
    d_text: int = 32
    norm_groups: int = 8
    time_dim: int = 64

    def __post_init__(self):
        object.__setattr__(self, "channel_mults", tuple(self.channel_mults))
        object.__setattr__(self, "attention_levels", tuple(self.attention_levels))
        for level in self.attention_levels:
            if not 0 <= level < len(self.channel_mults):
                raise ValueError(f"attention level {level} outside 0..{len(self.channel_mults) - 1}")
        for c in self.norm_widths():
            if c % self.norm_groups:
                raise ValueError(f"width {c} not divisible by {self.norm_groups} norm groups")

    def widths(self) -> list[int]:
        return [self.base_width * m for m in self.channel_mults]

    def norm_widths(self) -> list[int]:
        w = self.widths()
        out = [self.base_width]
        ch = self.base_width
        for level, width in enumerate(w):
            for _ in range(self.num_res_blocks):
                out += [ch, width]
                ch = width
        out += [ch, ch]
        for level in reversed(range(len(w))):
            skip_ch = w[level]
            for _ in range(self.num_res_blocks):
                out += [ch + skip_ch, w[level]]
                ch = w[level]
        return sorted(set(out))


def timestep_embedding(t: int, dim: int, dtype=np.float32) -> Tensor:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = float(t) * freqs
    return Tensor(np.concatenate([np.sin(args), np.cos(args)])[None].astype(dtype))


class ResBlock(Module):
    kind = "block"

    def __init__(self, ci: int, co: int, cfg: UNetConfig, rng: CounterRNG):
        self.norm1 = GroupNorm(ci, cfg.norm_groups)
        self.conv1 = Conv3d(ci, co, rng)
        self.time = TimeMLP(cfg.time_dim, co, rng)
        self.norm2 = GroupNorm(co, cfg.norm_groups)
        self.conv2 = Conv3d(co, co, rng)
        self.skip = Conv3d(ci, co, rng, k=1) if ci != co else None

    def __call__(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(T.silu(self.norm1(x)))
        tb = self.time(temb)  # [1, co]
        h = T.add(h, T.reshape(tb, (1, tb.shape[1], 1, 1)))
        h = self.conv2(T.silu(self.norm2(h)))
        return T.add(x if self.skip is None else self.skip(x), h)


class TransformerBlock(Module):
    """Spatial sparse-causal attention, text cross-attention, temporal attention."""

    kind = "block"

    def __init__(self, c: int, cfg: UNetConfig, rng: CounterRNG):
        self.norm = GroupNorm(c, cfg.norm_groups)
        self.proj_in = Conv3d(c, c, rng, k=1)
        self.attn_sc = AttentionParams(SPARSE_CAUSAL, c, cfg.d_k, rng)
        self.attn_cross = AttentionParams(CROSS, c, cfg.d_k, rng, d_ctx=cfg.d_text)
        self.attn_temp = AttentionParams(TEMPORAL, c, cfg.d_k, rng, zero_out=True)
        self.proj_out = Conv3d(c, c, rng, k=1)

    def __call__(self, x: Tensor, text: Tensor) -> Tensor:
        h = self.proj_in(self.norm(x))
        h = sparse_causal_attention(h, self.attn_sc)
        h = cross_attention(h, text, self.attn_cross)
        h = temporal_self_attention(h, self.attn_temp)
        return T.add(x, self.proj_out(h))


@dataclass
class ConditioningBundle:
    text_embedding: Tensor  # [L, d_text]
    depth_latent: Tensor  # [F, 1, H, W]
    is_unconditional: bool = False


class UNet(Module):
    kind = "unet"

    def __init__(self, cfg: UNetConfig, seed: int = 0):
        rng = CounterRNG(seed)
        self.config = cfg
        widths = cfg.widths()
        self.conv_in = Conv3d(cfg.latent_channels + cfg.depth_channels, cfg.base_width, rng)
        self.down: list[Module] = []
        self.down_attn: list[Module] = []
        self.downsample: list[Module] = []
        ch = cfg.base_width
        skips = []
        for level, width in enumerate(widths):
            for _ in range(cfg.num_res_blocks):
                self.down.append(ResBlock(ch, width, cfg, rng))
                ch = width
                if level in cfg.attention_levels:
                    self.down_attn.append(TransformerBlock(ch, cfg, rng))
                skips.append(ch)
            if level < len(widths) - 1:
                self.downsample.append(Conv3d(ch, ch, rng, stride=2))
        self.mid = ResBlock(ch, ch, cfg, rng)
        self.up: list[Module] = []
        self.up_attn: list[Module] = []
        self.upsample: list[Module] = []
        for level in reversed(range(len(widths))):
            for _ in range(cfg.num_res_blocks):
                self.up.append(ResBlock(ch + skips.pop(), widths[level], cfg, rng))
                ch = widths[level]
                if level in cfg.attention_levels:
                    self.up_attn.append(TransformerBlock(ch, cfg, rng))
            if level > 0:
                self.upsample.append(Conv3d(ch, ch, rng))
        self.norm_out = GroupNorm(ch, cfg.norm_groups)
        self.conv_out = Conv3d(ch, cfg.latent_channels, rng)

    def __call__(self, z_t: Tensor, t: int, cond: ConditioningBundle) -> Tensor:
        return unet_forward(self, z_t, t, cond)


def unet_forward(unet: UNet, z_t: Tensor, t: int, cond: ConditioningBundle) -> Tensor:
    """Predict the noise in ``z_t`` (depth concatenated as an extra input channel)."""
    cfg = unet.config
    f, c, h, w = z_t.shape
    if c != cfg.latent_channels:
        raise ShapeError(f"latent has {c} channels, model expects {cfg.latent_channels}")
    depth = cond.depth_latent
    if depth.shape != (f, cfg.depth_channels, h, w):
        raise ShapeError(f"depth latent {depth.shape} does not match latent {z_t.shape}")
    levels = len(cfg.channel_mults)
    if h % 2 ** (levels - 1) or w % 2 ** (levels - 1):
        raise ShapeError(f"latent {h}x{w} not divisible by {2 ** (levels - 1)}")
    temb = timestep_embedding(t, cfg.time_dim, z_t.dtype)
    text = cond.text_embedding
    x = unet.conv_in(T.concat([z_t, depth], axis=1))
    skips = []
    res = iter(unet.down)
    attn = iter(unet.down_attn)
    for level in range(levels):
        for _ in range(cfg.num_res_blocks):
            x = next(res)(x, temb)
            if level in cfg.attention_levels:
                x = next(attn)(x, text)
            skips.append(x)
        if level < levels - 1:
            x = unet.downsample[level](x)
    x = unet.mid(x, temb)
    res = iter(unet.up)
    attn = iter(unet.up_attn)
    ups = iter(unet.upsample)
    for level in reversed(range(levels)):
        for _ in range(cfg.num_res_blocks):
            x = next(res)(T.concat([x, skips.pop()], axis=1), temb)
            if level in cfg.attention_levels:
                x = next(attn)(x, text)
        if level > 0:
            x = next(ups)(T.upsample2x(x))
    return unet.conv_out(T.silu(unet.norm_out(x)))


# ---------------------------------------------------------------------------
# autoencoder


class Autoencoder(Module):
    """Two stride-2 stages: ``[F, 3, 4H, 4W] <-> [F, 4, H, W]``."""

    kind = "autoencoder"
    factor = 4

    def __init__(self, width: int = 32, latent_channels: int = 4, seed: int = 1):
        rng = CounterRNG(seed)
        self.width = width
        self.enc = [
            Conv(3, width, rng),
            Conv(width, width, rng, stride=2),
            Conv(width, width, rng),
            Conv(width, width, rng, stride=2),
            Conv(width, width, rng),
            Conv(width, latent_channels, rng),
        ]
        self.dec = [
            Conv(latent_channels, width, rng),
            Conv(width, width, rng),
            Conv(width, width, rng),
            Conv(width, width, rng),
            Conv(width, width, rng),
            Conv(width, 3, rng),
        ]
        self.latent_scale = Tensor(np.ones(1, np.float32))

    def encode_raw(self, x: Tensor) -> Tensor:
        for conv in self.enc[:-1]:
            x = T.silu(conv(x))
        return self.enc[-1](x)

    def decode_raw(self, z: Tensor) -> Tensor:
        d = self.dec
        x = T.silu(d[0](z))
        x = T.silu(d[1](x))
        x = T.silu(d[2](T.upsample2x(x)))
        x = T.silu(d[3](x))
        x = T.silu(d[4](T.upsample2x(x)))
        return d[5](x)

    def encode(self, frames: Tensor) -> Tensor:
        if frames.ndim != 4 or frames.shape[1] != 3:
            raise ShapeError(f"expected [F, 3, H, W] frames, got {frames.shape}")
        if frames.shape[2] % self.factor or frames.shape[3] % self.factor:
            raise ShapeError(f"frame size {frames.shape[2:]} not divisible by {self.factor}")
        with T.no_tape():
            z = self.encode_raw(frames)
        return Tensor(z.data * self.latent_scale.data[0])

    def decode(self, z: Tensor) -> Tensor:
        with T.no_tape():
            x = self.decode_raw(Tensor(z.data / self.latent_scale.data[0]))
        return Tensor(np.clip(x.data, -1.0, 1.0))


# ---------------------------------------------------------------------------
# full model + checkpoints


class VideoDiffusionModel(Module):
    kind = "model"

    def __init__(self, config: UNetConfig | None = None, ae_width: int = 32, seed: int = 0):
        self.config = config or UNetConfig()
        self.ae = Autoencoder(ae_width, self.config.latent_channels, seed=seed + 1)
        self.unet = UNet(self.config, seed=seed)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in sorted(self.named_parameters()):
            h.update(name.encode())
            h.update(p.data.tobytes())
        return h.hexdigest()


def parameter_checksums(model: Module) -> dict[str, str]:
    return {name: hashlib.sha256(p.data.tobytes()).hexdigest() for name, p in model.named_parameters()}


def save_checkpoint(model: VideoDiffusionModel, path) -> None:
    """Directory of ``<name>.vdt`` files plus ``manifest.txt`` and ``config.json``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    kinds = dict(model.named_kinds())
    lines = []
    for name, p in sorted(model.named_parameters()):
        T.save_tensor(p, path / f"{name}.vdt")
        shape = "x".join(str(s) for s in p.shape)
        lines.append(f"{name} {shape} {kinds[name]} {int(p.requires_grad)}")
    (path / "manifest.txt").write_text("\n".join(lines) + "\n")
    meta = {"unet": asdict(model.config), "ae_width": model.ae.width}
    (path / "config.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")


def load_checkpoint(path) -> VideoDiffusionModel:
    path = Path(path)
    meta = json.loads((path / "config.json").read_text())
    model = VideoDiffusionModel(UNetConfig(**meta["unet"]), ae_width=meta["ae_width"])
    for line in (path / "manifest.txt").read_text().splitlines():
        name, shape, _kind, trainable = line.split()
        t = T.load_tensor(path / f"{name}.vdt")
        expected = tuple(int(s) for s in shape.split("x"))
        if t.shape != expected or t.shape != model.get_parameter(name).shape:
            raise ValueError(f"{name}: stored shape {t.shape} does not match {expected}")
        t.requires_grad = trainable == "1"
        model.set_parameter(name, t)
    return model
