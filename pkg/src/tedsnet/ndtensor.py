"""Dense float64 tensors with a small reverse-mode autodiff engine.

Only the operations the segmentation pipeline needs are provided.  Every
differentiable op records its parents and a closure computing the
vector-Jacobian product; :meth:`Tensor.backward` replays those closures in
exact reverse execution order (ops are stamped with a global sequence
number when they run).
"""

from __future__ import annotations

import contextlib
import itertools
import struct
from typing import BinaryIO, Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _kernels

_SEQ = itertools.count()
_GRAD_ENABLED = True


class DimensionError(ValueError):
    """Operand extents are incompatible."""


@contextlib.contextmanager
def no_grad():
    """Disable taping inside the block (evaluation mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._seq = next(_SEQ)
        self.name = name

    # -- basics ------------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() needs a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff ------------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every grad-enabled leaf."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = _reachable(self)
        order.sort(key=lambda t: t._seq, reverse=True)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return scale(self, 1.0 / other)

    def __rtruediv__(self, other):
        return mul(_wrap(other), reciprocal(self))

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return scale(tsum(self, axis, keepdims), 1.0 / float(n))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _reachable(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    out: list[Tensor] = []
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        out.append(t)
        stack.extend(p for p in t._parents if p.requires_grad)
    return out


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _make(a.data * s, (a,), lambda g: (g * s,))


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return _make(out, (a,), lambda g: (-g * out * out,))


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def relu(x: Tensor) -> Tensor:
    # derivative at exactly 0 is 0
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),))


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out, dtype=np.float64), (x,), back)


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def index(x: Tensor, idx) -> Tensor:
    def back(g):
        full = np.zeros_like(x.data)
        if _has_fancy(idx):
            np.add.at(full, idx, g)
        else:
            full[idx] += g
        return (full,)

    return _make(np.array(x.data[idx], dtype=np.float64), (x,), back)


def _has_fancy(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(out, tensors, back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


# ---------------------------------------------------------------------------
# convolution / normalisation / pooling
# ---------------------------------------------------------------------------


def _as_batch(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise DimensionError(f"expected (C,H,W) or (N,C,H,W), got {x.shape}")
    return x, False


def _unbatch(y: Tensor, squeeze: bool) -> Tensor:
    return reshape(y, y.shape[1:]) if squeeze else y


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, pad: int | None = None) -> Tensor:
    """Same-size 2-D cross-correlation; x is (C,H,W) or (N,C,H,W), w is (O,C,k,k)."""
    x, squeeze = _as_batch(x)
    O, C, k, k2 = w.shape
    if k != k2 or k % 2 == 0:
        raise DimensionError(f"kernel must be square and odd, got {w.shape}")
    if x.shape[1] != C:
        raise DimensionError(f"input has {x.shape[1]} channels, kernel expects {C}")
    if pad is None:
        pad = (k - 1) // 2
    if pad != (k - 1) // 2:
        raise DimensionError("pad must equal (k-1)/2")
    N, _, H, W = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    if k == 1:
        out = np.einsum("nchw,oc->nohw", x.data, w.data[:, :, 0, 0], optimize=True)
        cols = None
    else:
        # (N, H, W, C, k, k) patch matrix
        cols = np.ascontiguousarray(sliding_window_view(xp, (k, k), axis=(2, 3)).transpose(0, 2, 3, 1, 4, 5))
        out = (cols.reshape(N * H * W, C * k * k) @ w.data.reshape(O, -1).T).reshape(N, H, W, O)
        out = out.transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def back(g):
        if k == 1:
            w2 = w.data[:, :, 0, 0]
            gx = np.einsum("nohw,oc->nchw", g, w2, optimize=True)
            gw = np.einsum("nohw,nchw->oc", g, x.data, optimize=True)[:, :, None, None]
        else:
            gm = g.transpose(0, 2, 3, 1).reshape(N * H * W, O)
            gw = (gm.T @ cols.reshape(N * H * W, C * k * k)).reshape(w.shape)
            dcols = (gm @ w.data.reshape(O, -1)).reshape(N, H, W, C, k, k)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + H, j : j + W] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad : pad + H, pad : pad + W] if pad else gxp
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _unbatch(_make(out, parents, back), squeeze)


def instance_norm2d(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise every (sample, channel) plane to zero mean / unit variance."""
    x, squeeze = _as_batch(x)
    if x.shape[2] * x.shape[3] < 2:
        raise DimensionError("instance norm needs at least 2 pixels per plane")
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def back(g):
        gm = g.mean(axis=(2, 3), keepdims=True)
        gxm = (g * xhat).mean(axis=(2, 3), keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    return _unbatch(_make(xhat, (x,), back), squeeze)


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 / stride-2 max pooling; ties go to the first element in row-major order."""
    x, squeeze = _as_batch(x)
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise DimensionError(f"maxpool needs even extents, got {x.shape[2:]}")
    out, arg = _kernels.maxpool2x2(x.data)
    return _unbatch(_make(out, (x,), lambda g: (_kernels.maxpool2x2_grad(arg, g),)), squeeze)


def dropout2d(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Zero whole channels with probability ``p`` and rescale survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    lead = x.shape[:-2]
    keep = (rng.random(lead) >= p).astype(np.float64) / (1.0 - p)
    keep = keep[..., None, None]
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------


def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) linear-interpolation operator, align-corners-false, clamped."""
    A = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    rows = np.arange(n_out)
    np.add.at(A, (rows, lo), 1.0 - frac)
    np.add.at(A, (rows, hi), frac)
    return A


def separable(x: Tensor, A_rows: np.ndarray, A_cols: np.ndarray) -> Tensor:
    """Apply ``A_rows @ plane @ A_cols.T`` to every trailing (H, W) plane."""
    out = np.matmul(np.matmul(A_rows, x.data), A_cols.T)
    return _make(out, (x,), lambda g: (np.matmul(np.matmul(A_rows.T, g), A_cols),))


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    H, W = x.shape[-2:]
    return separable(x, interp_matrix(H, out_h), interp_matrix(W, out_w))


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ValueError(f"upsampling factor must be >= 1, got {factor}")
    H, W = x.shape[-2:]
    return resize_bilinear(x, factor * H, factor * W)


def grid_sample(img: Tensor, rows: Tensor, cols: Tensor) -> Tensor:
    """Bilinear sampling of (N,C,H,W) ``img`` at absolute (N,Ho,Wo) coordinates, clamp-to-edge."""
    out = _kernels.bilinear_sample(img.data, rows.data, cols.data)

    def back(g):
        return _kernels.bilinear_sample_grad(img.data, rows.data, cols.data, g)

    return _make(out, (img, rows, cols), back)


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: dict,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """In-place Adam update with bias correction.

    ``state`` carries ``t`` plus first/second moment lists and is created on
    first use.
    """
    if "t" not in state:
        state["t"] = 0
        state["m"] = [np.zeros_like(p) for p in params]
        state["v"] = [np.zeros_like(p) for p in params]
    state["t"] += 1
    t = state["t"]
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        if p.shape != g.shape:
            raise DimensionError(f"param {p.shape} vs grad {g.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state: dict = {}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adam_step([p.data for p in self.params], grads, self.state, self.lr, *self.betas, self.eps)


# ---------------------------------------------------------------------------
# TNSR serialisation
# ---------------------------------------------------------------------------

MAGIC = b"TNSR"
VERSION = 1


def tensor_to_bytes(arr) -> bytes:
    a = np.ascontiguousarray(arr.data if isinstance(arr, Tensor) else arr, dtype="<f8")
    head = MAGIC + struct.pack("<II", VERSION, a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + a.tobytes()


def write_tensor(f: BinaryIO, arr) -> int:
    blob = tensor_to_bytes(arr)
    f.write(blob)
    return len(blob)


def read_tensor(f: BinaryIO) -> np.ndarray:
    magic = f.read(4)
    if magic != MAGIC:
        raise ValueError(f"bad TNSR magic {magic!r}")
    version, rank = struct.unpack("<II", f.read(8))
    if version != VERSION:
        raise ValueError(f"unsupported TNSR version {version}")
    shape = struct.unpack(f"<{rank}Q", f.read(8 * rank)) if rank else ()
    n = int(np.prod(shape)) if rank else 1
    raw = f.read(8 * n)
    if len(raw) != 8 * n:
        raise ValueError("truncated TNSR payload")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)


def save_tensor(path, arr) -> None:
    with open(path, "wb") as f:
        write_tensor(f, arr)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_tensor(f)
