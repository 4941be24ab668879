"""Dense tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps a C-contiguous numpy array. Operations record
themselves on the innermost active :class:`Tape` whenever one of their inputs
requires a gradient; :func:`backward` walks that tape in reverse.

Outside a tape nothing is recorded, which is how inference runs.
"""

from __future__ import annotations

import contextlib
import struct
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NumericalError",
    "CounterRNG",
    "randn",
    "backward",
    "grad_check",
    "count_macs",
    "save_tensor",
    "load_tensor",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "conv2d",
    "softmax",
    "group_norm",
    "silu",
    "tabs",
    "reshape",
    "transpose",
    "concat",
    "take",
    "getitem",
    "upsample2x",
    "tsum",
    "mean",
    "sum_of_squares",
]


class ShapeError(ValueError):
    pass


class NumericalError(ArithmeticError):
    pass


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericalError(f"non-finite value produced by {where}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE if dtype is None else dtype)
        arr = np.ascontiguousarray(arr)
        _check_finite(arr, "tensor creation")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("only division by a python scalar is supported")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def _as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


# ---------------------------------------------------------------------------
# tape


class _Node:
    __slots__ = ("inputs", "output", "backward_fn", "op")

    def __init__(self, inputs, output, backward_fn, op):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.op = op


class Tape:
    """Ordered record of primitive operations.

    Use as a context manager; nested tapes shadow outer ones.
    """

    _stack: list["Tape"] = []

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    @classmethod
    def current(cls) -> "Tape | None":
        return cls._stack[-1] if cls._stack else None


@contextlib.contextmanager
def no_tape() -> Iterator[None]:
    """Suspend recording (used for in-place parameter updates and eval)."""
    saved = Tape._stack
    Tape._stack = []
    try:
        yield
    finally:
        Tape._stack = saved


def _emit(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    _check_finite(out_data, op)
    out = Tensor.__new__(Tensor)
    out.data = np.ascontiguousarray(out_data)
    out.grad = None
    tape = Tape.current()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(_Node(tuple(inputs), out, backward_fn, op))
    else:
        out.requires_grad = False
    return out


def backward(loss: Tensor, tape: Tape | None = None, inputs: Sequence[Tensor] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires grad.

    Leaves are tensors that require grad but were not produced on ``tape``.
    When ``inputs`` is given only those leaves receive gradients.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape if tape is not None else Tape.current()
    if tape is None:
        raise RuntimeError("no tape recorded for backward")
    if not loss.requires_grad:
        return
    produced = {id(n.output) for n in tape.nodes}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for t, tg in zip(node.inputs, in_grads):
            if tg is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + tg
            else:
                grads[key] = tg
            if key not in produced:
                leaves[key] = t
    wanted = None if inputs is None else {id(t) for t in inputs}
    for key, t in leaves.items():
        if wanted is not None and key not in wanted:
            continue
        g = grads[key].astype(t.dtype, copy=False)
        _check_finite(g, "backward")
        t.grad = g.copy() if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# random numbers


class CounterRNG:
    """Philox-4x64 counter stream with Box-Muller normals.

    Every draw consumes raw 64-bit words from ``numpy.random.Philox`` keyed
    directly by ``seed``. Uniforms use the top 53 bits: ``u = (w >> 11 + 1) / 2**53``
    which lies in (0, 1]. A normal pair comes from two uniforms ``u1, u2`` as
    ``sqrt(-2 ln u1) * (cos 2 pi u2, sin 2 pi u2)``; element ``2k`` takes the
    cosine branch and ``2k+1`` the sine branch.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._bits = np.random.Philox(key=self.seed)

    def _raw(self, n: int) -> np.ndarray:
        return self._bits.random_raw(n).astype(np.uint64)

    def uniform(self, n: int) -> np.ndarray:
        w = self._raw(n)
        return ((w >> np.uint64(11)).astype(np.float64) + 1.0) * (1.0 / 9007199254740992.0)

    def normal(self, shape, dtype=DEFAULT_DTYPE) -> np.ndarray:
        shape = _checked_shape(shape)
        n = int(np.prod(shape))
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log(u[:, 0]))
        theta = 2.0 * np.pi * u[:, 1]
        z = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1).reshape(-1)[:n]
        return z.reshape(shape).astype(dtype)

    def integers(self, low: int, high: int) -> int:
        """Uniform integer in [low, high] inclusive."""
        span = high - low + 1
        return low + min(int(self.uniform(1)[0] * span), span - 1)


def _checked_shape(shape) -> tuple[int, ...]:
    shape = (shape,) if isinstance(shape, int) else tuple(int(s) for s in shape)
    if not shape or any(s < 1 for s in shape):
        raise ShapeError(f"invalid shape {shape}")
    return shape


def randn(shape, seed: int, dtype=DEFAULT_DTYPE, requires_grad: bool = False) -> Tensor:
    return Tensor(CounterRNG(seed).normal(shape, dtype), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# multiply-accumulate instrumentation

_mac_counters: list[list[int]] = []


@contextlib.contextmanager
def count_macs() -> Iterator[list[int]]:
    """Count multiply-accumulates performed by :func:`matmul` inside the block.

    Yields a one-element list whose entry is updated in place.
    """
    box = [0]
    _mac_counters.append(box)
    try:
        yield box
    finally:
        _mac_counters.pop()


def _tally(n: int) -> None:
    for box in _mac_counters:
        box[0] += n


# ---------------------------------------------------------------------------
# primitives


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a, None), _as_tensor(b, None)
    out = a.data + b.data
    sa, sb = a.shape, b.shape
    return _emit("add", out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a, None), _as_tensor(b, None)
    out = a.data - b.data
    sa, sb = a.shape, b.shape
    return _emit("sub", out, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a, None), _as_tensor(b, None)
    ad, bd = a.data, b.data
    return _emit(
        "mul",
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", a.data * a.dtype.type(c), (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, batching over leading ones."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul shape mismatch {a.shape} x {b.shape}")
    out = np.matmul(ad, bd)
    if _mac_counters:
        _tally(int(np.prod(out.shape)) * ad.shape[-1])

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _emit("matmul", out, (a, b), grad_fn)


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # xp: [B, C, Hp, Wp] -> [B, C*k*k, ho*wo]
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    b, c = xp.shape[:2]
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(b, c * k * k, ho * wo)


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Cross-correlation with same-style padding ``k // 2``.

    ``x`` is ``[C_in, H, W]`` or a batch ``[B, C_in, H, W]``; batch items are
    convolved independently with identical per-item arithmetic.
    """
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    wd = w.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise ShapeError(f"conv2d expects [B,C,H,W] and [Co,Ci,k,k], got {x.shape}, {w.shape}")
    b, c, h, wid = xd.shape
    co, ci, k, k2 = wd.shape
    if ci != c:
        raise ShapeError(f"conv2d channel mismatch: input {c}, kernel {ci}")
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d needs an odd square kernel, got {k}x{k2}")
    pad = k // 2
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wid + 2 * pad - k) // stride + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    cols = _im2col(xp, k, stride, ho, wo)
    wmat = wd.reshape(co, ci * k * k)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out = out + bias.data[:, None]
    out = out.reshape(b, co, ho, wo)
    if squeeze:
        out = out[0]

    def grad_fn(g):
        g4 = (g[None] if squeeze else g).reshape(b, co, ho * wo)
        gw = np.matmul(g4, cols.transpose(0, 2, 1)).sum(axis=0).reshape(wd.shape)
        gcols = np.matmul(wmat.T, g4).reshape(b, c, k, k, ho, wo)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, :, i, j]
        gx = gxp[:, :, pad : pad + h, pad : pad + wid] if pad else gxp
        if squeeze:
            gx = gx[0]
        gb = g4.sum(axis=(0, 2)) if bias is not None else None
        return gx, gw, gb

    inputs = (x, w) if bias is None else (x, w, bias)
    return _emit("conv2d", out, inputs, grad_fn)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    if not -xd.ndim <= axis < xd.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", y, (x,), grad_fn)


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Group normalisation of ``[B, C, H, W]`` per batch item."""
    xd = x.data
    b, c = xd.shape[:2]
    if c % groups:
        raise ShapeError(f"{c} channels not divisible into {groups} groups")
    xg = xd.reshape(b, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(xd.shape)
    bshape = (1, c) + (1,) * (xd.ndim - 2)
    gd, bd = gamma.data.reshape(bshape), beta.data.reshape(bshape)
    out = xhat * gd + bd
    n = xg.shape[2]

    def grad_fn(g):
        red = (0,) + tuple(range(2, xd.ndim))
        ggamma = (g * xhat).sum(axis=red)
        gbeta = g.sum(axis=red)
        gxhat = (g * gd).reshape(b, groups, -1)
        xh = xhat.reshape(b, groups, -1)
        gx = inv / n * (n * gxhat - gxhat.sum(axis=2, keepdims=True) - xh * (gxhat * xh).sum(axis=2, keepdims=True))
        return gx.reshape(xd.shape), ggamma, gbeta

    return _emit("group_norm", out, (x, gamma, beta), grad_fn)


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = np.exp(-np.logaddexp(0, -xd)).astype(xd.dtype)  # overflow-free sigmoid
    return _emit("silu", xd * s, (x,), lambda g: (g * (s * (1.0 + xd * (1.0 - s))),))


def tabs(x: Tensor) -> Tensor:
    xd = x.data
    return _emit("abs", np.abs(xd), (x,), lambda g: (g * np.sign(xd),))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _emit("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in xs], axis=axis)
    return _emit("concat", out, xs, lambda g: tuple(np.split(g, bounds, axis=axis)))


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in the gradient."""
    idx = np.asarray(indices, dtype=np.intp)
    xd = x.data

    def grad_fn(g):
        gx = np.zeros_like(xd)
        np.add.at(gx, (slice(None),) * axis + (idx,), g)
        return (gx,)

    return _emit("take", np.take(xd, idx, axis=axis), (x,), grad_fn)


def getitem(x: Tensor, index) -> Tensor:
    """Basic (slice/int) indexing."""
    xd = x.data

    def grad_fn(g):
        gx = np.zeros_like(xd)
        gx[index] = g
        return (gx,)

    return _emit("getitem", xd[index], (x,), grad_fn)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of the last two axes."""
    xd = x.data
    out = xd.repeat(2, axis=-2).repeat(2, axis=-1)

    def grad_fn(g):
        s = g.shape
        return (g.reshape(s[:-2] + (s[-2] // 2, 2, s[-1] // 2, 2)).sum(axis=(-3, -1)),)

    return _emit("upsample2x", out, (x,), grad_fn)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    xd = x.data
    out = xd.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xd.shape).copy(),)

    return _emit("sum", np.asarray(out, dtype=xd.dtype), (x,), grad_fn)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def sum_of_squares(x: Tensor) -> Tensor:
    xd = x.data
    return _emit("sum_of_squares", np.asarray((xd * xd).sum(), dtype=xd.dtype), (x,), lambda g: (2.0 * g * xd,))


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(
    fn: Callable[[Tensor], Tensor],
    x: Tensor,
    epsilon: float = 1e-3,
    reference_dtype=np.float64,
) -> float:
    """Max elementwise relative error between backward() and central differences.

    The analytic gradient is computed at ``x``'s own precision. Finite
    differences are evaluated on a ``reference_dtype`` copy of ``x`` (numpy
    type promotion carries that precision through ``fn``), so a 32-bit check
    is measured against an accurate reference rather than 32-bit round-off.
    Relative error per element is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    leaf = Tensor(x.data.copy(), requires_grad=True)
    with Tape() as tape:
        y = fn(leaf)
    backward(y, tape, inputs=[leaf])
    analytic = np.zeros(x.shape) if leaf.grad is None else leaf.grad.astype(np.float64)

    base = x.data.astype(reference_dtype)
    numeric = np.zeros(x.size)
    flat = base.reshape(-1)
    with no_tape():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = fn(Tensor(base)).data.reshape(()).item()
            flat[i] = orig - epsilon
            fm = fn(Tensor(base)).data.reshape(()).item()
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * epsilon)
    a = analytic.reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(a - numeric) / denom))


# ---------------------------------------------------------------------------
# snapshot files

_MAGIC = b"VDT1"


def save_tensor(t: Tensor | np.ndarray, path) -> None:
    """Write ``VDT1`` + u32-LE header length + "rank e1 e2 ..." + f32-LE data."""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    header = " ".join(str(v) for v in (arr.ndim, *arr.shape)).encode("utf-8")
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    Path(path).write_bytes(_MAGIC + struct.pack("<I", len(header)) + header + payload)


def load_tensor(path) -> Tensor:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a VDT1 file")
    (n,) = struct.unpack("<I", raw[4:8])
    fields = [int(v) for v in raw[8 : 8 + n].decode("utf-8").split()]
    rank, shape = fields[0], tuple(fields[1:])
    if len(shape) != rank:
        raise ValueError(f"{path}: header rank {rank} disagrees with extents {shape}")
    arr = np.frombuffer(raw[8 + n :], dtype="<f4")
    if arr.size != int(np.prod(shape)):
        raise ValueError(f"{path}: payload holds {arr.size} floats, header says {shape}")
    return Tensor(arr.reshape(shape).astype(np.float32))
