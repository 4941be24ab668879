"""Procedural multi-object videos with ground-truth depth, plus a toy prompt embedder.

Scene spec files are line oriented; blank lines and ``#`` comments are ignored::

    scene F H W bg            # frame count, canvas size, background gray 0..255
    bgdepth 10.0              # optional, background distance (default 10)
    prompt two circles cross  # optional, free text to end of line
    circle RADIUS R G B       # starts a new object (colors 0..255)
    rect WIDTH HEIGHT R G B   # or a rectangle
    xy x1 y1 x2 y2 ...        # F centre positions in pixels, for the last object
    depth d1 d2 ...           # F positive distances, for the last object

A pixel ``(row, col)`` is sampled at its centre ``(col + .5, row + .5)``; a
circle covers it when the centre lies within ``RADIUS`` of the object centre,
a rectangle when it lies within half the width and half the height.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .tensor import CounterRNG, Tensor

PROMPT_LENGTH = 8
TEXT_DIM = 32
NULL_TOKEN = "<null>"
FIXTURE_NAMES = (
    "two_circle_crossing",
    "occlusion_chain",
    "static_pair",
    "color_swap_pair",
    "approach_recede",
    "single_object",
)


class SceneError(ValueError):
    pass


@dataclass
class SceneObject:
    shape: str  # "circle" or "rect"
    size: tuple[float, ...]  # (radius,) or (width, height)
    color: tuple[int, int, int]
    xy: list[tuple[float, float]] = field(default_factory=list)
    depth: list[float] = field(default_factory=list)


@dataclass
class SceneSpec:
    frames: int
    height: int
    width: int
    background: int = 0
    background_depth: float = 10.0
    prompt: str = ""
    objects: list[SceneObject] = field(default_factory=list)

    def validate(self) -> None:
        if self.frames < 1 or self.height < 1 or self.width < 1:
            raise SceneError("scene extents must be positive")
        if self.background_depth <= 0:
            raise SceneError("background depth must be positive")
        for i, obj in enumerate(self.objects):
            if obj.shape not in ("circle", "rect"):
                raise SceneError(f"object {i}: unknown shape {obj.shape!r}")
            if len(obj.xy) != self.frames or len(obj.depth) != self.frames:
                raise SceneError(
                    f"object {i}: trajectory has {len(obj.xy)} positions and "
                    f"{len(obj.depth)} depths, expected {self.frames}"
                )
            if min(obj.depth) <= 0:
                raise SceneError(f"object {i}: depths must be strictly positive")


@dataclass
class RenderedVideo:
    rgb: Tensor  # [F, 3, H, W] in [-1, 1]
    depth: Tensor  # [F, 1, H, W] raw distances
    prompt: str = ""

    @property
    def frames(self) -> int:
        return self.rgb.shape[0]


def parse_scene(text: str) -> SceneSpec:
    spec: SceneSpec | None = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip() if not raw.lstrip().startswith("prompt") else raw.strip()
        if not line:
            continue
        key, *rest = line.split()
        try:
            if key == "scene":
                f, h, w, bg = rest
                spec = SceneSpec(int(f), int(h), int(w), int(bg))
                continue
            if spec is None:
                raise SceneError("first directive must be 'scene F H W bg'")
            if key == "bgdepth":
                spec.background_depth = float(rest[0])
            elif key == "prompt":
                spec.prompt = line[len("prompt") :].strip()
            elif key == "circle":
                r, cr, cg, cb = rest
                spec.objects.append(SceneObject("circle", (float(r),), (int(cr), int(cg), int(cb))))
            elif key == "rect":
                w_, h_, cr, cg, cb = rest
                spec.objects.append(SceneObject("rect", (float(w_), float(h_)), (int(cr), int(cg), int(cb))))
            elif key == "xy":
                vals = [float(v) for v in rest]
                if len(vals) % 2:
                    raise SceneError("xy needs an even number of values")
                spec.objects[-1].xy = list(zip(vals[::2], vals[1::2]))
            elif key == "depth":
                spec.objects[-1].depth = [float(v) for v in rest]
            else:
                raise SceneError(f"unknown directive {key!r}")
        except (ValueError, IndexError) as exc:
            if isinstance(exc, SceneError):
                raise SceneError(f"line {lineno}: {exc}") from None
            raise SceneError(f"line {lineno}: malformed {key!r} directive") from None
    if spec is None:
        raise SceneError("empty scene file")
    spec.validate()
    return spec


def format_scene(spec: SceneSpec) -> str:
    lines = [f"scene {spec.frames} {spec.height} {spec.width} {spec.background}"]
    lines.append(f"bgdepth {spec.background_depth:g}")
    if spec.prompt:
        lines.append(f"prompt {spec.prompt}")
    for obj in spec.objects:
        size = " ".join(f"{s:g}" for s in obj.size)
        lines.append(f"{obj.shape} {size} {' '.join(str(c) for c in obj.color)}")
        lines.append("xy " + " ".join(f"{x:g} {y:g}" for x, y in obj.xy))
        lines.append("depth " + " ".join(f"{d:g}" for d in obj.depth))
    return "\n".join(lines) + "\n"


def load_scene(path) -> SceneSpec:
    return parse_scene(Path(path).read_text())


def load_fixture(name: str) -> SceneSpec:
    if name not in FIXTURE_NAMES:
        raise KeyError(f"unknown fixture {name!r}; choose from {', '.join(FIXTURE_NAMES)}")
    return parse_scene(resources.files("depthvid.fixtures").joinpath(f"{name}.scene").read_text())


def _coverage(obj: SceneObject, frame: int, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    cx, cy = obj.xy[frame]
    px, py = cols + 0.5, rows + 0.5
    if obj.shape == "circle":
        (r,) = obj.size
        return (px - cx) ** 2 + (py - cy) ** 2 <= r * r
    w, h = obj.size
    return (np.abs(px - cx) <= w / 2) & (np.abs(py - cy) <= h / 2)


def render(spec: SceneSpec) -> RenderedVideo:
    """Rasterise with a per-pixel nearest-object rule (ties go to the earlier object)."""
    spec.validate()
    F, H, W = spec.frames, spec.height, spec.width
    rows, cols = np.mgrid[0:H, 0:W].astype(np.float64)
    bg = spec.background / 127.5 - 1.0
    rgb = np.full((F, 3, H, W), bg, dtype=np.float32)
    depth = np.full((F, 1, H, W), spec.background_depth, dtype=np.float32)
    for f in range(F):
        # paint far to near so nearer objects overwrite
        order = sorted(range(len(spec.objects)), key=lambda i: (-spec.objects[i].depth[f], -i))
        for i in order:
            obj = spec.objects[i]
            d = obj.depth[f]
            mask = _coverage(obj, f, rows, cols) & (d <= depth[f, 0])
            depth[f, 0][mask] = d
            for ch in range(3):
                rgb[f, ch][mask] = obj.color[ch] / 127.5 - 1.0
    return RenderedVideo(Tensor(rgb), Tensor(depth), spec.prompt)


def depth_to_latent(depth: Tensor | np.ndarray, factor: int = 4) -> Tensor:
    """Inverse depth normalised per video to [-1, 1] (near = +1), then block-averaged."""
    d = np.asarray(depth.data if isinstance(depth, Tensor) else depth, dtype=np.float64)
    if np.any(d <= 0):
        raise SceneError("depth values must be strictly positive")
    f, c, h, w = d.shape
    if h % factor or w % factor:
        raise SceneError(f"depth size {h}x{w} not divisible by {factor}")
    inv = 1.0 / d
    lo, hi = inv.min(), inv.max()
    norm = np.zeros_like(inv) if hi == lo else 2.0 * (inv - lo) / (hi - lo) - 1.0
    pooled = norm.reshape(f, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))
    return Tensor(pooled.astype(np.float32))


def sample_frames(video: RenderedVideo, n: int) -> RenderedVideo:
    """Keep ``n`` evenly spaced frames ``floor(k (F-1)/(n-1) + 1/2)``."""
    idx = frame_indices(video.frames, n)
    return RenderedVideo(Tensor(video.rgb.data[idx]), Tensor(video.depth.data[idx]), video.prompt)


def frame_indices(total: int, n: int) -> list[int]:
    if not 1 <= n <= total:
        raise SceneError(f"cannot sample {n} frames from {total}")
    if n == 1:
        return [0]
    return [int(np.floor(k * (total - 1) / (n - 1) + 0.5)) for k in range(n)]


# ---------------------------------------------------------------------------
# prompt embedding


def token_seed(token: str) -> int:
    """64-bit BLAKE2b digest of the UTF-8 token, little-endian."""
    return int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "little")


def token_vector(token: str) -> np.ndarray:
    v = CounterRNG(token_seed(token)).normal(TEXT_DIM, np.float64)
    return (v / np.linalg.norm(v)).astype(np.float32)


def tokenize(text: str) -> list[str]:
    return text.lower().split()


def embed_prompt(text: str) -> Tensor:
    """``[8, 32]`` rows: one unit vector per token, padded with the null row."""
    toks = tokenize(text)[:PROMPT_LENGTH]
    toks += [NULL_TOKEN] * (PROMPT_LENGTH - len(toks))
    return Tensor(np.stack([token_vector(t) for t in toks]))


def null_embedding() -> Tensor:
    return embed_prompt("")


# ---------------------------------------------------------------------------
# image files


def write_ppm(path, rgb: np.ndarray) -> None:
    """``rgb``: [3, H, W] in [-1, 1] -> binary P6."""
    img = np.clip(np.floor((np.asarray(rgb, np.float64) + 1.0) * 127.5 + 0.5), 0, 255).astype(np.uint8)
    h, w = img.shape[1:]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + img.transpose(1, 2, 0).tobytes())


def _read_netpbm(path) -> tuple[str, int, int, int, bytes]:
    raw = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    magic, w, h, maxval = fields[0].decode(), int(fields[1]), int(fields[2]), int(fields[3])
    return magic, w, h, maxval, raw[pos + 1 :]


def read_ppm(path) -> np.ndarray:
    magic, w, h, maxval, body = _read_netpbm(path)
    if magic != "P6" or maxval != 255:
        raise ValueError(f"{path}: only 8-bit P6 supported")
    img = np.frombuffer(body[: 3 * w * h], np.uint8).reshape(h, w, 3).transpose(2, 0, 1)
    return (img / 127.5 - 1.0).astype(np.float32)


def write_pgm16(path, values: np.ndarray) -> None:
    """``values``: [H, W] integers in 0..65535 -> binary P5, big-endian."""
    v = np.asarray(values)
    h, w = v.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n65535\n".encode() + v.astype(">u2").tobytes())


def read_pgm16(path) -> np.ndarray:
    magic, w, h, maxval, body = _read_netpbm(path)
    if magic != "P5" or maxval != 65535:
        raise ValueError(f"{path}: only 16-bit P5 supported")
    return np.frombuffer(body[: 2 * w * h], ">u2").reshape(h, w).astype(np.int64)


def save_video(video: RenderedVideo, outdir, contact_sheet: bool = False) -> None:
    """Write ``frame_%04d.ppm``, ``depth_%04d.pgm``, ``depth_range.txt`` and ``prompt.txt``.

    Depth is quantised per video as ``round(65535 (d - dmin) / (dmax - dmin))``
    (all zeros when the video has a single distance).
    """
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    rgb = video.rgb.data
    d = video.depth.data.astype(np.float64)
    lo, hi = float(d.min()), float(d.max())
    q = np.zeros(d.shape, np.int64) if hi == lo else np.floor(65535.0 * (d - lo) / (hi - lo) + 0.5).astype(np.int64)
    for f in range(rgb.shape[0]):
        write_ppm(out / f"frame_{f:04d}.ppm", rgb[f])
        write_pgm16(out / f"depth_{f:04d}.pgm", q[f, 0])
    (out / "depth_range.txt").write_text(f"{lo!r} {hi!r}\n")
    (out / "prompt.txt").write_text(video.prompt + "\n")
    if contact_sheet:
        write_ppm(out / "contact_sheet.ppm", np.concatenate(list(rgb), axis=2))


def save_frames(rgb: np.ndarray, outdir, contact_sheet: bool = True) -> None:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    for f in range(rgb.shape[0]):
        write_ppm(out / f"frame_{f:04d}.ppm", rgb[f])
    if contact_sheet:
        write_ppm(out / "contact_sheet.ppm", np.concatenate(list(rgb), axis=2))


def load_video(indir) -> RenderedVideo:
    src = Path(indir)
    frames = sorted(src.glob("frame_*.ppm"))
    if not frames:
        raise FileNotFoundError(f"no frame_*.ppm files in {src}")
    rgb = np.stack([read_ppm(p) for p in frames])
    depths = sorted(src.glob("depth_*.pgm"))
    if depths:
        lo, hi = (float(v) for v in (src / "depth_range.txt").read_text().split())
        q = np.stack([read_pgm16(p) for p in depths])[:, None].astype(np.float64)
        depth = lo + q / 65535.0 * (hi - lo)
    else:
        depth = np.ones((rgb.shape[0], 1) + rgb.shape[2:])
    prompt_file = src / "prompt.txt"
    prompt = prompt_file.read_text().strip() if prompt_file.exists() else ""
    return RenderedVideo(Tensor(rgb), Tensor(depth.astype(np.float32)), prompt)


def random_scene(seed: int, frames: int = 8, size: int = 32, max_objects: int = 3) -> SceneSpec:
    """Random moving shapes, used to widen autoencoder training data."""
    rng = np.random.default_rng(seed)
    spec = SceneSpec(frames, size, size, int(rng.integers(0, 256)), 10.0, "")
    for _ in range(int(rng.integers(1, max_objects + 1))):
        color = tuple(int(c) for c in rng.integers(0, 256, 3))
        if rng.random() < 0.5:
            obj = SceneObject("circle", (float(rng.uniform(3, max(3.0, size / 4))),), color)
        else:
            obj = SceneObject("rect", tuple(float(v) for v in rng.uniform(4, max(4.0, size / 2), 2)), color)
        start, end = rng.uniform(0, size, 2), rng.uniform(0, size, 2)
        d0, d1 = rng.uniform(1.0, 9.0, 2)
        for k in range(frames):
            a = k / max(frames - 1, 1)
            obj.xy.append(tuple(float(v) for v in start + a * (end - start)))
            obj.depth.append(float(d0 + a * (d1 - d0)))
        spec.objects.append(obj)
    return spec
