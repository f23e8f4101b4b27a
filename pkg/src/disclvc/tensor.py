"""A small reverse-mode autodiff engine on top of numpy.

Tensors hold float32 data by default. Every differentiable op records its
parents and a closure mapping the output gradient to per-parent gradients;
``Tensor.backward`` walks the graph in reverse topological order.

Only the broadcasting the networks in this package need is supported:
numpy broadcasting for elementwise ops, with gradients summed back to the
operand shape.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse

from .errors import ConfigError, ShapeError, UsageError

_DTYPE = np.float32


def get_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the engine's float type (used by gradient checks)."""
    global _DTYPE
    prev = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
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
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that requires grad."""
        if grad is None:
            if self.data.size != 1:
                raise UsageError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype).reshape(self.shape)
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    g = np.asarray(g, dtype=node.data.dtype)
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                prev = grads.get(key)
                grads[key] = pg if prev is None else prev + pg

    # -- operator sugar ---------------------------------------------------
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
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def _raise_item(t):
    raise UsageError(f"item() on tensor of shape {t.shape}")


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap a forward result with a user-supplied backward closure.

    ``backward(g)`` must return one gradient (or None) per parent.
    """
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


_make = custom_op


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise arithmetic -----------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data / b.data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    return _make(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sin(a: Tensor) -> Tensor:
    return _make(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def cos(a: Tensor) -> Tensor:
    return _make(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _make(a.data * pos, (a,), lambda g: (g * pos,))


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def silu(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))
    return _make(a.data * s, (a,), lambda g: (g * s * (1.0 + a.data * (1.0 - s)),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), bw)


def smooth_l1(d: Tensor, beta: float = 1.0) -> Tensor:
    """Elementwise Huber-style loss: 0.5 d^2 / beta inside |d| < beta, |d| - beta/2 outside."""
    x = d.data
    small = np.abs(x) < beta
    out = np.where(small, 0.5 * x * x / beta, np.abs(x) - 0.5 * beta)
    return _make(out, (d,), lambda g: (g * np.where(small, x / beta, np.sign(x)),))


# -- reductions and shape ops ---------------------------------------------
def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _make(out, (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    return _make(a.data.swapaxes(i, j), (a,), lambda g: (g.swapaxes(i, j),))


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (slice, int, type(None), type(Ellipsis))) for p in parts)


def _scatter_rows(shape, idx: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Sum rows of ``g`` into a zero array of ``shape`` at integer row indices ``idx``."""
    flat = idx.reshape(-1)
    flat = np.where(flat < 0, flat + shape[0], flat)
    gg = g.reshape(len(flat), -1)
    sel = sparse.csr_matrix((np.ones(len(flat), dtype=g.dtype), (flat, np.arange(len(flat)))),
                            shape=(shape[0], len(flat)))
    return np.asarray(sel @ gg).reshape(shape)


def getitem(a: Tensor, idx) -> Tensor:
    if isinstance(idx, Tensor):
        idx = idx.data.astype(np.int64)
    out = a.data[idx]
    basic = _is_basic_index(idx)

    def bw(g):
        if isinstance(idx, np.ndarray) and idx.dtype.kind in "iu":
            return (_scatter_rows(a.data.shape, idx, g),)
        full = np.zeros_like(a.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(out, copy=True), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(tensors), bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(out, tuple(tensors), bw)


def pad_rows(a: Tensor, before: int, after: int, axis: int = -2) -> Tensor:
    """Zero-pad along ``axis``."""
    axis = axis % a.ndim
    width = [(0, 0)] * a.ndim
    width[axis] = (before, after)
    out = np.pad(a.data, width)
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(before, before + a.shape[axis])
    sl = tuple(sl)
    return _make(out, (a,), lambda g: (g[sl],))


def expand_rows(a: Tensor, repeats: np.ndarray, axis: int = 0) -> Tensor:
    """Repeat each slice along ``axis`` ``repeats[i]`` times (length regulation)."""
    repeats = np.asarray(repeats, dtype=np.int64)
    out = np.repeat(a.data, repeats, axis=axis)
    starts = np.concatenate([[0], np.cumsum(repeats)[:-1]])

    def bw(g):
        return (np.add.reduceat(g, starts, axis=axis) if len(starts) else np.zeros_like(a.data),)

    return _make(out, (a,), bw)


# -- linear algebra ---------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs ≥2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                a2 = a.data.reshape(-1, a.shape[-1])
                gb = a2.T @ g.reshape(-1, g.shape[-1])
            else:
                gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else y + b


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Same-padded 1-D cross-correlation over the time axis.

    x: (..., T, C_in); w: (K, C_in, C_out) with K odd.
    y[t] = sum_k sum_c w[k, c] * x[t + k - (K-1)/2, c], zero outside [0, T).
    """
    K, cin, cout = w.shape
    if K % 2 == 0:
        raise ConfigError(f"conv1d kernel size must be odd, got {K}")
    if x.shape[-1] != cin:
        raise ShapeError(f"conv1d channel mismatch: input {x.shape}, kernel {w.shape}")
    T = x.shape[-2]
    p = (K - 1) // 2
    width = [(0, 0)] * (x.ndim - 2) + [(p, p), (0, 0)]
    xp = np.pad(x.data, width)
    cols = np.concatenate([xp[..., k:k + T, :] for k in range(K)], axis=-1)
    wmat = w.data.reshape(K * cin, cout)
    out = cols @ wmat

    def bw(g):
        gx = gw = None
        if w.requires_grad:
            gw = (cols.reshape(-1, K * cin).T @ g.reshape(-1, cout)).reshape(K, cin, cout)
        if x.requires_grad:
            gcols = g @ wmat.T
            gxp = np.zeros_like(xp)
            for k in range(K):
                gxp[..., k:k + T, :] += gcols[..., k * cin:(k + 1) * cin]
            gx = gxp[..., p:p + T, :]
        return gx, gw

    y = _make(out, (x, w), bw)
    return y if b is None else y + b


# -- normalisation / attention helpers ------------------------------------
def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (a,), bw)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), bw)


def layer_norm(x: Tensor, weight: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then optionally apply an affine map."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd

    def bw(g):
        return (rstd * (g - g.mean(axis=-1, keepdims=True)
                        - xhat * (g * xhat).mean(axis=-1, keepdims=True)),)

    y = _make(xhat, (x,), bw)
    if weight is not None:
        y = y * weight
    if bias is not None:
        y = y + bias
    return y


def rope_frequencies(dim: int, base: float = 10000.0) -> np.ndarray:
    if dim % 2:
        raise ConfigError(f"RoPE needs an even feature dim, got {dim}")
    return base ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)


def rope(x: Tensor, positions) -> Tensor:
    """Rotate interleaved feature pairs (2i, 2i+1) by position * base^(-2i/D).

    x: (..., T, H, D); positions: length-T integer sequence.
    """
    D = x.shape[-1]
    theta = rope_frequencies(D)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * theta[None, :]
    c = np.cos(ang).astype(x.data.dtype)[:, None, :]
    s = np.sin(ang).astype(x.data.dtype)[:, None, :]
    xe, xo = x.data[..., 0::2], x.data[..., 1::2]
    out = np.empty_like(x.data)
    out[..., 0::2] = xe * c - xo * s
    out[..., 1::2] = xe * s + xo * c

    def bw(g):
        ge, go = g[..., 0::2], g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = ge * c + go * s
        gx[..., 1::2] = -ge * s + go * c
        return (gx,)

    return _make(out, (x,), bw)


def cross_entropy(logits: Tensor, targets: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` over the last axis.

    ``weights`` (same shape as targets) selects/weights positions; the mean is
    taken over their sum. A zero weight sum yields a zero loss.
    """
    targets = np.asarray(targets, dtype=np.int64)
    flat = reshape(logits, (-1, logits.shape[-1]))
    lp = log_softmax(flat, axis=-1)
    picked = getitem(lp, (np.arange(flat.shape[0]), targets.reshape(-1)))
    if weights is None:
        return -mean(picked)
    w = np.asarray(weights, dtype=logits.data.dtype).reshape(-1)
    total = float(w.sum())
    if total == 0.0:
        return tsum(picked * 0.0)
    return -tsum(picked * w) * (1.0 / total)


def zeros(*shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DTYPE))


def ones(*shape) -> Tensor:
    return Tensor(np.ones(shape, dtype=_DTYPE))


def no_grad_params(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
