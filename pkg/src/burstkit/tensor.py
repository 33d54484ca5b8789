"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps an ``ndarray`` and remembers the operation that made
it. Calling :meth:`Tensor.backward` on a scalar walks the recorded graph in
reverse topological order and accumulates gradients into every leaf that has
``requires_grad`` set.

Gradients accumulate across calls; use :func:`zero_grad` (or
``Tensor.zero_grad``) between optimisation steps.
"""

from __future__ import annotations

import contextlib
import struct
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
NORM_EPS = 1e-12

_default_dtype = np.float32


class ShapeError(ValueError):
    pass


def get_default_dtype():
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    _default_dtype = np.dtype(dtype).type


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for new tensors (e.g. float64 for grad checks)."""
    prev = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype.kind in "fc":
        return arr
    return arr.astype(_default_dtype)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = _as_array(data, dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- construction -----------------------------------------------------

    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        out = cls(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        g = _unbroadcast(g, self.data.shape)
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    # -- backward -----------------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar root, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = _unbroadcast(pg, parent.data.shape)
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # -- operators ----------------------------------------------------------

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=_default_dtype), requires_grad=requires_grad)


def _t(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_default_dtype))


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _check_broadcast(a, b, "add")
    return Tensor._make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _check_broadcast(a, b, "sub")
    return Tensor._make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _check_broadcast(a, b, "multiply")
    return Tensor._make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    _check_broadcast(a, b, "divide")
    out = a.data / b.data

    def backward(g):
        return g / b.data, -g * out / b.data

    return Tensor._make(out, (a, b), backward)


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data**exponent
    return Tensor._make(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return Tensor._make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return Tensor._make(out, (a,), lambda g: (g * 0.5 / out,))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor); gradient flows only where a > floor."""
    keep = a.data > floor
    return Tensor._make(np.where(keep, a.data, floor).astype(a.data.dtype), (a,), lambda g: (g * keep,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._make(a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    z = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype)
    return Tensor._make(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._make(out, (a,), lambda g: (g * (1.0 - out * out),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (a,), backward)


# ---------------------------------------------------------------------------
# reductions and shape ops


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return Tensor._make(np.asarray(out), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return sum_(a, axes, keepdims) * (1.0 / n)


def var(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Population (1/n) variance."""
    centered = a - mean(a, axis, keepdims=True)
    return mean(centered * centered, axis, keepdims)


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return Tensor._make(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return Tensor._make(out, (a,), lambda g: (np.transpose(g, inv),))


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(p, (slice, int, type(Ellipsis))) or p is None for p in parts)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return Tensor._make(np.array(out), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_t(x) for x in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for x in tensors[1:]:
        if x.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(x.shape, ref)) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {ref} and {x.shape} along axis {axis}")
    out = np.concatenate([x.data for x in tensors], axis=ax)
    bounds = np.cumsum([0] + [x.shape[ax] for x in tensors])

    def backward(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=ax) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return Tensor._make(out, tensors, backward)


def l2_normalize(a: Tensor, axis: int = -1, eps: float = NORM_EPS) -> Tensor:
    """a / max(||a||, eps) along ``axis``."""
    x = a.data
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    guarded = norm <= eps
    denom = np.where(guarded, eps, norm)
    out = x / denom

    def backward(g):
        # below eps the denominator is constant
        proj = (g * out).sum(axis=axis, keepdims=True)
        gx = np.where(guarded, g / eps, (g - out * proj) / denom)
        return (gx,)

    return Tensor._make(out, (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _t(a), _t(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    out = a.data @ b.data

    def backward(g):
        ad, bd = a.data, b.data
        if bd.ndim == 1:
            ga = np.multiply.outer(g, bd)
            gb = (ad * g[..., None]).reshape(-1, bd.shape[0]).sum(axis=0)
            return ga, gb
        if ad.ndim == 1:
            return g @ np.swapaxes(bd, -1, -2), np.multiply.outer(ad, g)
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return Tensor._make(out, (a, b), backward)


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight + bias`` with weight of shape (in, out)."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"dense: input {x.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gx = g @ weight.data.T
        gw = x.data.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        if bias is None:
            return gx, gw
        return gx, gw, g.reshape(-1, g.shape[-1]).sum(axis=0)

    return Tensor._make(out, parents, backward)


# ---------------------------------------------------------------------------
# convolution and pooling (NCHW)


def _pair(v) -> tuple[int, int]:
    return (v, v) if isinstance(v, int) else tuple(v)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """2-d cross-correlation via im2col. ``weight`` is (out, in, kh, kw)."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input {x.shape} too small for kernel {weight.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data
    cols = np.empty((n, ho, wo, c, kh, kw), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[..., i, j] = xp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw].transpose(0, 2, 3, 1)
    cols = cols.reshape(n * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(o, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gflat = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (gflat.T @ cols).reshape(weight.shape)
        gcols = (gflat @ wmat).reshape(n, ho, wo, c, kh, kw)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += gcols[..., i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, ph : ph + h, pw : pw + w]
        if bias is None:
            return gx, gw
        return gx, gw, gflat.sum(axis=0)

    return Tensor._make(np.ascontiguousarray(out), parents, backward)


def max_pool2d(x: Tensor, kernel=3, stride=2, padding=1) -> Tensor:
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    n, c, h, w = x.shape
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"max_pool2d: input {x.shape} too small for kernel {(kh, kw)}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=-np.inf)
    windows = np.stack(
        [xp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] for i in range(kh) for j in range(kw)],
        axis=-1,
    )
    arg = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for k in range(kh * kw):
            i, j = divmod(k, kw)
            gxp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += g * (arg == k)
        return (gxp[:, :, ph : ph + h, pw : pw + w],)

    return Tensor._make(out, (x,), backward)


def global_avg_pool2d(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C)."""
    return mean(x, axis=(2, 3))


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Batch normalisation over every axis except 1 (channels).

    In training mode the batch statistics are used and the running buffers
    are updated in place (unbiased variance, exponential moving average).
    """
    axes = tuple(i for i in range(x.ndim) if i != 1)
    bshape = [1] * x.ndim
    bshape[1] = x.shape[1]
    g_ = gamma.data.reshape(bshape)
    b_ = beta.data.reshape(bshape)
    if not training:
        std = np.sqrt(running_var.reshape(bshape) + eps)
        xhat = (x.data - running_mean.reshape(bshape)) / std
        out = xhat * g_ + b_

        def backward_eval(g):
            return g * g_ / std, (g * xhat).sum(axis=axes), g.sum(axis=axes)

        return Tensor._make(out.astype(x.data.dtype), (x, gamma, beta), backward_eval)

    m = x.size // x.shape[1]
    mu = x.data.mean(axis=axes, keepdims=True)
    centered = x.data - mu
    v = (centered * centered).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(v + eps)
    xhat = centered * inv
    out = xhat * g_ + b_
    running_mean *= 1 - momentum
    running_mean += momentum * mu.reshape(-1)
    running_var *= 1 - momentum
    running_var += momentum * v.reshape(-1) * (m / max(m - 1, 1))

    def backward(g):
        gxhat = g * g_
        gx = inv * (
            gxhat - gxhat.mean(axis=axes, keepdims=True) - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return Tensor._make(out, (x, gamma, beta), backward)


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout. Identity when not training or ``rate == 0``."""
    if not training or rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    rng = rng if rng is not None else np.random.default_rng()
    mask = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return Tensor._make(x.data * mask, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# checkpoints


_BKPT_MAGIC = b"BKPT"
_BKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: Mapping[str, np.ndarray | Tensor]) -> None:
    """Write named arrays as float32 little-endian in the BKPT layout."""
    chunks = [_BKPT_MAGIC, struct.pack("<II", _BKPT_VERSION, len(params))]
    for name, value in params.items():
        arr = np.asarray(value.data if isinstance(value, Tensor) else value)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != _BKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    if len(buf) < 12:
        raise CheckpointError(f"{path}: truncated header")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != _BKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            nbytes = 4 * int(np.prod(dims, dtype=np.int64))
            if pos + nbytes > len(buf):
                raise CheckpointError(f"{path}: truncated data for {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=pos).reshape(dims).copy()
            pos += nbytes
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    return out
