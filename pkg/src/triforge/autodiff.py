"""Minimal dense-tensor library with reverse-mode automatic differentiation.

Tensors wrap contiguous numpy arrays (float64 by default, float32 behind
``set_default_dtype``).  Every operation that sees a ``requires_grad`` input
records itself on an implicit per-forward graph; ``backward`` on a scalar
walks the graph in reverse topological order.  Broadcasting follows numpy's
trailing-dimension alignment rules; the matching gradient reduction happens
in ``_unbroadcast``.

Domain-specific operations (plane sampling, marching tetrahedra, soft
rasterization, ...) are registered from their own modules through
``from_op``, which is the single extension point.
"""

from __future__ import annotations

import os
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .kernels import scatter_add_rows

_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True
_CHECK_FINITE = bool(int(os.environ.get("TRIFORGE_CHECK_FINITE", "0")))


def set_default_dtype(dtype) -> None:
    """Set the storage dtype for new tensors (np.float64 or np.float32)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / optimizer steps)."""
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
    """Dense array plus optional gradient and graph bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_freed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype != _DEFAULT_DTYPE:
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._freed = False

    # -- basic introspection ------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # -- gradient machinery --------------------------------------------------
    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, free: bool = False) -> None:
        """Populate ``grad`` on every reachable requires_grad leaf.

        Must be called on a scalar.  Repeated calls accumulate into leaf
        gradients.  With ``free=True`` the graph is released afterwards and a
        further call raises.
        """
        if self.size != 1:
            raise ValueError(f"backward requires a scalar, got shape {self.shape}")
        if self._freed:
            raise RuntimeError("graph already freed")
        if self.requires_grad and self._backward is None and self._parents == ():
            # a bare leaf: gradient of itself is 1
            self._accumulate_leaf(np.ones_like(self.data))
            return
        if self._backward is None and self._parents == ():
            raise RuntimeError("tensor does not require grad (no graph recorded)")

        order = self._toposort()
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is not None:
                for parent, pg in node._backward(g):
                    if not parent.requires_grad:
                        continue
                    if parent._parents == () and parent._backward is None:
                        parent._accumulate_leaf(pg)
                    else:
                        key = id(parent)
                        if key in grads:
                            grads[key] = grads[key] + pg
                        else:
                            grads[key] = pg
        if free:
            for node in order:
                node._parents = ()
                node._backward = None
                node._freed = True

    def _accumulate_leaf(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True).reshape(self.shape)
        else:
            self.grad = self.grad + g.reshape(self.shape)

    def _toposort(self) -> list["Tensor"]:
        # iterative DFS; returns reverse topological order (self first)
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
                if p._parents or p._backward is not None:
                    stack.append((p, False))
        order.reverse()
        return order

    # -- operator sugar -------------------------------------------------------
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

    def __pow__(self, e):
        return power(self, e)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, *axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


class Param(Tensor):
    """Trainable leaf tensor; module traversal collects these by type."""

    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def from_op(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward: Callable[[np.ndarray], Iterable[tuple[Tensor, np.ndarray]]],
) -> Tensor:
    """Create an op-result tensor; ``backward(g)`` yields (parent, grad) pairs."""
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite values produced by an operation")
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape` (inverse of numpy trailing-dim broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


# -- arithmetic ----------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return from_op(out, (a, b), lambda g: [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape))])


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return from_op(out, (a, b), lambda g: [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape))])


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return from_op(
        out,
        (a, b),
        lambda g: [(a, _unbroadcast(g * b.data, a.shape)), (b, _unbroadcast(g * a.data, b.shape))],
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    def bw(g):
        return [
            (a, _unbroadcast(g / b.data, a.shape)),
            (b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape)),
        ]
    return from_op(out, (a, b), bw)


def power(a, e: float) -> Tensor:
    a = as_tensor(a)
    out = a.data**e
    return from_op(out, (a,), lambda g: [(a, g * e * a.data ** (e - 1))])


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return from_op(out, (a,), lambda g: [(a, g * out)])


def log(a) -> Tensor:
    a = as_tensor(a)
    return from_op(np.log(a.data), (a,), lambda g: [(a, g / a.data)])


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return from_op(out, (a,), lambda g: [(a, g * 0.5 / out)])


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return from_op(out, (a,), lambda g: [(a, g * (1.0 - out * out))])


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-a.data))
    return from_op(out, (a,), lambda g: [(a, g * out * (1.0 - out))])


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)
    return from_op(out, (a,), lambda g: [(a, g * (a.data > 0))])


def silu(a) -> Tensor:
    a = as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * s
    return from_op(out, (a,), lambda g: [(a, g * (s + a.data * s * (1.0 - s)))])


def absval(a) -> Tensor:
    a = as_tensor(a)
    return from_op(np.abs(a.data), (a,), lambda g: [(a, g * np.sign(a.data))])


def sin(a) -> Tensor:
    a = as_tensor(a)
    return from_op(np.sin(a.data), (a,), lambda g: [(a, g * np.cos(a.data))])


def cos(a) -> Tensor:
    a = as_tensor(a)
    return from_op(np.cos(a.data), (a,), lambda g: [(a, -g * np.sin(a.data))])


def clip(a, lo: float, hi: float) -> Tensor:
    """Hard clamp; gradient passes only strictly inside the interval."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    mask = (a.data > lo) & (a.data < hi)
    return from_op(out, (a,), lambda g: [(a, g * mask)])


def where(cond: np.ndarray, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.data, b.data)
    def bw(g):
        return [
            (a, _unbroadcast(np.where(cond, g, 0.0), a.shape)),
            (b, _unbroadcast(np.where(cond, 0.0, g), b.shape)),
        ]
    return from_op(out, (a, b), bw)


# -- reductions ------------------------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    def bw(g):
        g = np.asarray(g)
        if axis is None:
            return [(a, np.broadcast_to(g, a.shape).copy())]
        if not keepdims:
            g = np.expand_dims(g, axis)
        return [(a, np.broadcast_to(g, a.shape).copy())]
    return from_op(np.asarray(out), (a,), bw)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- shape manipulation ------------------------------------------------------------


def reshape(a, *shape) -> Tensor:
    a = as_tensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out = a.data.reshape(shape)
    return from_op(out, (a,), lambda g: [(a, g.reshape(a.shape))])


def transpose(a, *axes) -> Tensor:
    a = as_tensor(a)
    if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    if not axes:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    out = a.data.transpose(axes)
    return from_op(out, (a,), lambda g: [(a, g.transpose(inv))])


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    out = np.broadcast_to(a.data, shape).copy()
    return from_op(out, (a,), lambda g: [(a, _unbroadcast(g, a.shape))])


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)
    def bw(g):
        pairs = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            pairs.append((t, g[tuple(idx)]))
        return pairs
    return from_op(out, tensors, bw)


def getitem(a, key) -> Tensor:
    """Basic (slice/int/ellipsis) indexing; every selected position is unique."""
    a = as_tensor(a)
    out = a.data[key]
    def bw(g):
        ga = np.zeros_like(a.data)
        ga[key] += g
        return [(a, ga)]
    return from_op(np.array(out, copy=True), (a,), bw)


def take(a, indices: np.ndarray, axis: int = 0) -> Tensor:
    """Gather along an axis with an integer index array (repeats allowed)."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.int64)
    out = np.take(a.data, indices, axis=axis)
    def bw(g):
        ga = np.zeros(a.shape, dtype=np.float64)  # scatter kernels are f8-only
        if axis == 0:
            flat_idx = indices.reshape(-1)
            src = np.asarray(g.reshape(len(flat_idx), -1), dtype=np.float64)
            scatter_add_rows(ga.reshape(a.shape[0], -1), flat_idx, src)
        else:
            np.add.at(ga, tuple([slice(None)] * axis + [indices]), g)
        return [(a, ga)]
    return from_op(out, (a,), bw)


def index_add(n: int, indices: np.ndarray, src, template_shape=None) -> Tensor:
    """out[i] = sum of src rows j with indices[j] == i; out has n rows."""
    src = as_tensor(src)
    indices = np.asarray(indices, dtype=np.int64)
    rows = np.asarray(src.data.reshape(src.shape[0], -1), dtype=np.float64)
    out = np.zeros((n,) + src.shape[1:], dtype=np.float64)
    scatter_add_rows(out.reshape(n, -1), indices, rows)
    def bw(g):
        return [(src, g[indices].reshape(src.shape))]
    return from_op(out, (src,), bw)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul supports 2-D operands; reshape first")
    out = a.data @ b.data

    def bw(g):
        pairs = []
        if a.requires_grad:
            pairs.append((a, g @ b.data.T))
        if b.requires_grad:
            pairs.append((b, a.data.T @ g))
        return pairs

    return from_op(out, (a, b), bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = []
    for t in tensors:
        t = as_tensor(t)
        shp = list(t.shape)
        shp.insert(axis if axis >= 0 else t.ndim + 1 + axis, 1)
        expanded.append(reshape(t, tuple(shp)))
    return concat(expanded, axis=axis)


# -- neural-net structured ops -----------------------------------------------------


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """(N, C, H, W) -> (N*H*W, C*kh*kw) patch matrix, same padding."""
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * kh * kw)


def _conv_raw(x: np.ndarray, w: np.ndarray, cols: np.ndarray | None = None):
    """Correlation with same padding; returns (out NCHW, cols)."""
    n, _, h, wd = x.shape
    cout, _, kh, kw = w.shape
    if cols is None:
        cols = _im2col(x, kh, kw)
    y = cols @ w.reshape(cout, -1).T
    return np.ascontiguousarray(y.reshape(n, h, wd, cout).transpose(0, 3, 1, 2)), cols


def conv2d(x, w, b=None, padding: str = "same") -> Tensor:
    """2-D convolution, stride 1, odd kernel, same padding.

    x: (N, Cin, H, W), w: (Cout, Cin, kh, kw), b: (Cout,) or None.
    """
    x, w = as_tensor(x), as_tensor(w)
    n, cin, h, wdt = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ValueError(f"channel mismatch: input {cin}, weights expect {cin_w}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("kernel size must be odd")
    if padding != "same":
        raise ValueError("only same padding is supported")

    out, cols = _conv_raw(x.data, w.data)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data.reshape(1, cout, 1, 1)

    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        pairs = []
        gy = None
        if w.requires_grad or b is not None:
            gy = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * h * wdt, cout)
        if x.requires_grad:
            # dX is the correlation of g with the rotated, transposed kernel
            wrot = np.ascontiguousarray(w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gx, _ = _conv_raw(np.ascontiguousarray(g), wrot)
            pairs.append((x, gx))
        if w.requires_grad:
            pairs.append((w, (gy.T @ cols).reshape(w.shape)))
        if b is not None and b.requires_grad:
            pairs.append((b, gy.sum(axis=0)))
        return pairs

    return from_op(out, parents, bw)


def avg_pool2(x) -> Tensor:
    """2x2 average pooling; spatial dims must be even."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"spatial dims must be even, got {h}x{w}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
    def bw(g):
        gx = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25
        return [(x, gx)]
    return from_op(out, (x,), bw)


def upsample2(x) -> Tensor:
    """2x nearest-neighbour upsampling."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    def bw(g):
        return [(x, g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))]
    return from_op(out, (x,), bw)


def layer_norm_op(a, eps: float = 1e-5) -> Tensor:
    """Normalize the trailing axis to zero mean / unit variance (fused vjp).

    One saved activation instead of the five a primitive composition would
    keep alive; matters for the 1e5-point MLP-head batches.
    """
    a = as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    y = xc * rstd

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        return [(a, rstd * (g - gm - y * gym))]

    return from_op(y, (a,), bw)


# -- gradient checking ---------------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must map a Tensor to a scalar Tensor.  Error per component is
    |analytic - numeric| / (|numeric| + 1e-8).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = as_tensor(x)
    probe = Tensor(x.data.copy(), requires_grad=True)
    out = f(probe)
    if not isinstance(out, Tensor) or out.size != 1:
        raise ValueError("f must return a scalar Tensor")
    out.backward(free=True)
    analytic = probe.grad.copy() if probe.grad is not None else np.zeros_like(probe.data)

    numeric = np.zeros_like(probe.data)
    flat = probe.data.reshape(-1)
    nflat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f(probe).item()
            flat[i] = orig - step
            fm = f(probe).item()
            flat[i] = orig
            nflat[i] = (fp - fm) / (2.0 * step)
    if not (np.all(np.isfinite(analytic)) and np.all(np.isfinite(numeric))):
        raise FloatingPointError("non-finite values during gradient check")
    rel = np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8)
    return float(rel.max()) if rel.size else 0.0
