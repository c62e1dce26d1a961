"""Dense tensors with a recording tape and analytic vector-Jacobian products.

Every differentiable operation in the package is a function of this module (or
is built with :func:`record_op`).  When a :class:`Tape` is active, each op
appends a :class:`Node` holding the saved forward values its adjoint needs;
:meth:`Tape.gradient` replays those adjoints in reverse order.

Without an active tape, ops are plain numpy computations.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special

__all__ = [
    "Tensor", "Tape", "Node", "TapeError", "NonFiniteError",
    "checked", "is_checked", "record_op", "as_tensor",
    "add", "sub", "mul", "div", "neg", "tsum", "mean", "exp", "log",
    "sigmoid", "silu", "gelu", "softplus", "softmax", "matmul",
    "reshape", "transpose", "flip", "split", "concat", "take", "channel_max",
    "channel_linear", "conv2d", "maxpool2", "bilinear_upsample2",
    "group_norm", "layer_norm", "unbroadcast",
]

DTYPES = {"double": np.float64, "single": np.float32}


class TapeError(RuntimeError):
    """Raised when an adjoint is requested for something the tape never saw."""


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf appears where the invariants forbid it."""


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def is_checked() -> bool:
    return getattr(_local, "checked", False)


@contextlib.contextmanager
def checked(enabled: bool = True):
    """Validate finiteness of every op output inside the block."""
    prev = is_checked()
    _local.checked = enabled
    try:
        yield
    finally:
        _local.checked = prev


def _require_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite value in {what}")


class Tensor:
    """A dense real array.

    ``data`` is a C-contiguous float64 (default) or float32 numpy array.  The
    constructor rejects NaN/Inf; op outputs are only re-checked in
    :func:`checked` mode.
    """

    __slots__ = ("data", "name")
    __array_priority__ = 100

    def __init__(self, data, dtype=None, name: str | None = None, _check: bool = True):
        if dtype is None:
            arr = np.asarray(data)
            if arr.dtype not in (np.float64, np.float32):
                arr = arr.astype(np.float64)
        else:
            arr = np.asarray(data, dtype=dtype)
        arr = np.require(arr, requirements="C")
        if _check:
            if any(s <= 0 for s in arr.shape):
                raise ValueError(f"tensor extents must be positive, got {arr.shape}")
            _require_finite(arr, "tensor construction")
        self.data = arr
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, op: str) -> "Tensor":
        if is_checked():
            _require_finite(arr, f"output of {op}")
        return cls(arr, _check=False)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def __len__(self) -> int:
        return self.shape[0]

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64), _check=False)


@dataclass(eq=False)
class Node:
    """One executed primitive: its inputs, output and adjoint closure."""

    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    _vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]

    def vjp(self, cotangent: np.ndarray) -> list[np.ndarray | None]:
        """Map an output cotangent to one cotangent per input (``None`` = zero)."""
        cot = np.asarray(cotangent)
        if cot.shape != self.output.shape:
            raise ValueError(f"{self.op}: cotangent shape {cot.shape} != output {self.output.shape}")
        grads = list(self._vjp(cot))
        if len(grads) != len(self.inputs):
            raise RuntimeError(f"{self.op}: adjoint returned {len(grads)} cotangents for {len(self.inputs)} inputs")
        for g, t in zip(grads, self.inputs):
            if g is not None and g.shape != t.shape:
                raise RuntimeError(f"{self.op}: cotangent shape {g.shape} != input {t.shape}")
        return grads


class Tape:
    """Ordered record of executed ops, used as a context manager.

    >>> with Tape() as tape:
    ...     y = sigmoid(x)
    ...     loss = tsum(y)
    >>> (gx,) = tape.gradient(loss, [x])
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._by_output: dict[int, Node] = {}

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise TapeError("tape stack corrupted")
        stack.pop()

    def _push(self, node: Node) -> None:
        self.nodes.append(node)
        self._by_output[id(node.output)] = node

    def node_for(self, tensor: Tensor) -> Node:
        try:
            return self._by_output[id(tensor)]
        except KeyError:
            raise TapeError(f"{tensor!r} was not produced by an op recorded on this tape") from None

    def gradient(self, target: Tensor, sources: Iterable[Tensor],
                 seed: np.ndarray | None = None) -> list[np.ndarray]:
        """Reverse-mode sweep from ``target``; one gradient array per source."""
        sources = list(sources)
        if seed is None:
            if target.size != 1:
                raise ValueError("gradient of a non-scalar target needs an explicit seed")
            seed = np.ones(target.shape, dtype=target.dtype)
        if id(target) not in self._by_output and not any(s is target for s in sources):
            raise TapeError("target was not produced on this tape")
        keep = {id(s) for s in sources}
        cot: dict[int, np.ndarray] = {id(target): np.asarray(seed, dtype=target.dtype)}
        for node in reversed(self.nodes):
            key = id(node.output)
            g = cot.get(key) if key in keep else cot.pop(key, None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if gi is None:
                    continue
                key = id(inp)
                prev = cot.get(key)
                cot[key] = gi if prev is None else prev + gi
        return [cot.get(id(s), np.zeros(s.shape, dtype=s.dtype)) for s in sources]


def record_op(op: str, out: np.ndarray, inputs: Sequence[Tensor],
              vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Wrap a forward result and register its adjoint on the active tape."""
    result = Tensor._wrap(out, op)
    stack = _tape_stack()
    if stack:
        stack[-1]._push(Node(op, tuple(inputs), result, vjp))
    return result


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast cotangent back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# --------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return record_op("add", a.data + b.data, (a, b),
                     lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return record_op("sub", a.data - b.data, (a, b),
                     lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    ad, bd = a.data, b.data
    return record_op("mul", ad * bd, (a, b),
                     lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    ad, bd = a.data, b.data
    out = ad / bd
    return record_op("div", out, (a, b),
                     lambda g: (unbroadcast(g / bd, ad.shape), unbroadcast(-g * out / bd, bd.shape)))


def neg(a: Tensor) -> Tensor:
    return record_op("neg", -a.data, (a,), lambda g: (-g,))


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return record_op("sum", out, (x,), vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([shape[a] for a in axes]))
    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return record_op("mean", out, (x,), vjp)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return record_op("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return record_op("log", np.log(xd), (x,), lambda g: (g / xd,))


# --------------------------------------------------------------------------
# activations


def sigmoid(x: Tensor) -> Tensor:
    s = special.expit(x.data)
    return record_op("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = special.expit(xd)
    return record_op("silu", xd * s, (x,), lambda g: (g * s * (1.0 + xd * (1.0 - s)),))


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    xd = x.data
    cdf = special.ndtr(xd)

    def vjp(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return record_op("gelu", xd * cdf, (x,), vjp)


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    return record_op("softplus", np.logaddexp(0.0, xd), (x,), lambda g: (g * special.expit(xd),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return record_op("softmax", p, (x,), vjp)


# --------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes."""
    ad, bd = a.data, b.data

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return unbroadcast(ga, ad.shape), unbroadcast(gb, bd.shape)

    return record_op("matmul", ad @ bd, (a, b), vjp)


def channel_linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the last axis: ``x @ weight.T + bias`` at every position."""
    xd, wd = x.data, weight.data
    if xd.shape[-1] != wd.shape[1]:
        raise ValueError(f"channel_linear: input width {xd.shape[-1]} != weight cin {wd.shape[1]}")
    out = xd @ wd.T
    if bias is not None:
        if bias.shape != (wd.shape[0],):
            raise ValueError(f"channel_linear: bias shape {bias.shape} != ({wd.shape[0]},)")
        out = out + bias.data

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = xd.reshape(-1, xd.shape[-1])
        grads = [g @ wd, g2.T @ x2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record_op("channel_linear", out, inputs, vjp)


# --------------------------------------------------------------------------
# axis utilities


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return record_op("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record_op("transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,),
                     lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def flip(x: Tensor, axis: int) -> Tensor:
    return record_op("flip", np.flip(x.data, axis).copy(), (x,),
                     lambda g: (np.flip(g, axis).copy(),))


def take(x: Tensor, index: np.ndarray, axis: int) -> Tensor:
    """Gather along ``axis``; the adjoint scatter-adds (repeated indices allowed)."""
    index = np.asarray(index, dtype=np.intp)
    shape = x.shape
    axis = axis % x.ndim

    def vjp(g):
        out = np.zeros(shape, dtype=g.dtype)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, index, np.moveaxis(g, axis, 0))
        return (out,)

    return record_op("take", np.take(x.data, index, axis=axis), (x,), vjp)


def split(x: Tensor, axis: int, parts) -> list[Tensor]:
    """Split into ``parts`` equal pieces, or pieces of the listed sizes."""
    n = x.shape[axis]
    if isinstance(parts, int):
        if parts <= 0 or n % parts:
            raise ValueError(f"split: extent {n} not divisible into {parts} parts")
        sizes = [n // parts] * parts
    else:
        sizes = list(parts)
        if sum(sizes) != n or any(s <= 0 for s in sizes):
            raise ValueError(f"split: sizes {sizes} do not partition extent {n}")
    out = []
    start = 0
    for size in sizes:
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(start, start + size)
        sl = tuple(sl)

        def vjp(g, sl=sl):
            full = np.zeros(x.shape, dtype=g.dtype)
            full[sl] = g
            return (full,)

        out.append(record_op("split", x.data[sl].copy(), (x,), vjp))
        start += size
    return out


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ValueError(f"concat: shapes {[t.shape for t in tensors]} disagree off axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return record_op("concat", out, tuple(tensors),
                     lambda g: [p.copy() for p in np.split(g, bounds, axis=ax)])


def channel_max(x: Tensor, axis: int = 1, keepdims: bool = True) -> Tensor:
    """Max over one axis; ties route the gradient to the first index."""
    idx = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis)
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        gg = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(full, np.expand_dims(idx, axis), gg, axis=axis)
        return (full,)

    return record_op("channel_max", out, (x,), vjp)


# --------------------------------------------------------------------------
# spatial ops


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, pad=0, dilation: int = 1) -> Tensor:
    """2-D cross-correlation, NCHW layout.  ``pad`` may be an int or (ph, pw)."""
    xd, wd = x.data, weight.data
    b, cin, h, w = xd.shape
    cout, wcin, kh, kw = wd.shape
    if wcin != cin:
        raise ValueError(f"conv2d: input has {cin} channels, weight expects {wcin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("conv2d: kernel extents must be odd")
    if stride < 1 or dilation < 1:
        raise ValueError("conv2d: stride and dilation must be >= 1")
    ph, pw = _pair(pad)
    ho = (h + 2 * ph - dilation * (kh - 1) - 1) // stride + 1
    wo = (w + 2 * pw - dilation * (kw - 1) - 1) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d: non-positive output extent ({ho}, {wo})")
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else xd
    span_h, span_w = dilation * (kh - 1) + 1, dilation * (kw - 1) + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (span_h, span_w), axis=(2, 3))
    win = win[:, :, ::stride, ::stride, ::dilation, ::dilation][:, :, :ho, :wo]
    # win: [b, cin, ho, wo, kh, kw]
    out = np.tensordot(win, wd, axes=([1, 4, 5], [1, 2, 3]))  # [b, ho, wo, cout]
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if bias is not None:
        out += bias.data[None, :, None, None]

    def vjp(g):
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # [cout, cin, kh, kw]
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(kh):
            r0 = i * dilation
            for j in range(kw):
                c0 = j * dilation
                contrib = np.tensordot(wd[:, :, i, j], g, axes=([0], [1]))  # [cin, b, ho, wo]
                gxp[:, :, r0:r0 + stride * (ho - 1) + 1:stride,
                    c0:c0 + stride * (wo - 1) + 1:stride] += contrib.transpose(1, 0, 2, 3)
        gx = gxp[:, :, ph:ph + h, pw:pw + w] if (ph or pw) else gxp
        grads = [np.ascontiguousarray(gx), gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record_op("conv2d", out, inputs, vjp)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2.  Ties go to the first element in row-major window order."""
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2: spatial extents must be even, got {(h, w)}")
    win = x.data.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        gw = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = gw.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)
        return (gx,)

    return record_op("maxpool2", out, (x,), vjp)


def _upsample_matrix(n: int, dtype) -> np.ndarray:
    """Rows map output index o to input samples at (o + 0.5)/2 - 0.5, edge-clamped."""
    m = np.zeros((2 * n, n), dtype=dtype)
    for o in range(2 * n):
        src = max((o + 0.5) / 2.0 - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n - 1)
        i1 = min(i0 + 1, n - 1)
        frac = src - i0
        m[o, i0] += 1.0 - frac
        m[o, i1] += frac
    return m


def bilinear_upsample2(x: Tensor) -> Tensor:
    """Bilinear 2x upsampling with half-pixel centres (align-corners off)."""
    _, _, h, w = x.shape
    uh = _upsample_matrix(h, x.dtype)
    uw = _upsample_matrix(w, x.dtype)
    out = uh @ x.data @ uw.T
    return record_op("bilinear_upsample2", out, (x,), lambda g: (uh.T @ g @ uw,))


def _normalize_vjp(g_hat, xhat, inv_std, axes):
    m1 = g_hat.mean(axis=axes, keepdims=True)
    m2 = (g_hat * xhat).mean(axis=axes, keepdims=True)
    return inv_std * (g_hat - m1 - xhat * m2)


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    b, c, h, w = x.shape
    if groups <= 0 or c % groups:
        raise ValueError(f"group_norm: {c} channels not divisible into {groups} groups")
    xg = x.data.reshape(b, groups, c // groups, h, w)
    axes = (2, 3, 4)
    mu = xg.mean(axis=axes, keepdims=True)
    var = xg.var(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xg - mu) * inv_std
    gd, bd = gamma.data, beta.data
    xhat_flat = xhat.reshape(b, c, h, w)
    out = xhat_flat * gd[None, :, None, None] + bd[None, :, None, None]

    def vjp(g):
        g_hat = (g * gd[None, :, None, None]).reshape(xg.shape)
        gx = _normalize_vjp(g_hat, xhat, inv_std, axes).reshape(b, c, h, w)
        return gx, (g * xhat_flat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return record_op("group_norm", out, (x, gamma, beta), vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then a per-channel affine."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv_std
    gd = gamma.data
    out = xhat * gd + beta.data

    def vjp(g):
        gx = _normalize_vjp(g * gd, xhat, inv_std, -1)
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return record_op("layer_norm", out, (x, gamma, beta), vjp)
