"""Layers built on the autodiff engine: linear/conv/norm layers and DiT-style blocks."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor, parameter


class Module:
    """Parameter container. Tensors and sub-modules are discovered from attributes
    in assignment order, which fixes checkpoint and optimizer ordering."""

    training = True

    def named_tensors(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in self.__dict__.items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_tensors(name + ".")
            elif isinstance(val, (list, tuple)) and val and isinstance(val[0], Module):
                for i, m in enumerate(val):
                    yield from m.named_tensors(f"{name}.{i}.")

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, t in self.named_tensors(prefix):
            if t.requires_grad:
                yield name, t

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for key, val in self.__dict__.items():
            if key.startswith("_"):
                continue
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)) and val and isinstance(val[0], Module):
                for m in val:
                    yield from m.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_tensors(prefix)}

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "", strict: bool = True) -> None:
        for name, t in self.named_tensors(prefix):
            if name not in state:
                if strict:
                    raise KeyError(f"missing tensor {name!r} in state")
                continue
            arr = np.asarray(state[name])
            if arr.shape != t.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} != model shape {t.shape}")
            t.data = np.ascontiguousarray(arr, dtype=t.data.dtype)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True,
                 init: str = "uniform"):
        bound = 1.0 / math.sqrt(n_in)
        if init == "zero":
            w = np.zeros((n_in, n_out))
        else:
            w = rng.uniform(-bound, bound, size=(n_in, n_out))
        self.weight = parameter(w)
        self.bias = parameter(np.zeros(n_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class Embedding(Module):
    def __init__(self, n: int, dim: int, rng: np.random.Generator, scale: float = 1.0):
        self.weight = parameter(rng.normal(0.0, scale, size=(n, dim)))

    def forward(self, ids) -> Tensor:
        return T.getitem(self.weight, np.asarray(ids, dtype=np.int64))


class LayerNorm(Module):
    def __init__(self, dim: int, affine: bool = True, eps: float = 1e-5):
        self.eps = eps
        self.weight = parameter(np.ones(dim)) if affine else None
        self.bias = parameter(np.zeros(dim)) if affine else None

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.weight, self.bias, self.eps)


class Conv1d(Module):
    def __init__(self, n_in: int, n_out: int, kernel: int, rng: np.random.Generator):
        if kernel % 2 == 0:
            raise ConfigError(f"conv kernel must be odd, got {kernel}")
        bound = 1.0 / math.sqrt(n_in * kernel)
        self.weight = parameter(rng.uniform(-bound, bound, size=(kernel, n_in, n_out)))
        self.bias = parameter(np.zeros(n_out))

    def forward(self, x: Tensor) -> Tensor:
        return T.conv1d(x, self.weight, self.bias)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return x * keep


def key_padding_bias(lengths, T_max: int, dtype=None) -> np.ndarray:
    """Additive attention bias (B, 1, 1, T) that hides padded key positions."""
    dtype = dtype or T.get_dtype()
    lengths = np.asarray(lengths)
    valid = np.arange(T_max)[None, :] < lengths[:, None]
    return np.where(valid, 0.0, -1e9).astype(dtype)[:, None, None, :]


def length_mask(lengths, T_max: int, dtype=None) -> np.ndarray:
    """(B, T, 1) float mask of valid frames."""
    dtype = dtype or T.get_dtype()
    lengths = np.asarray(lengths)
    return (np.arange(T_max)[None, :] < lengths[:, None]).astype(dtype)[:, :, None]


class SelfAttention(Module):
    """Multi-head self-attention with rotary position embedding."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ConfigError(f"embed dim {dim} not divisible by {heads} heads")
        if (dim // heads) % 2:
            raise ConfigError("per-head dim must be even for RoPE")
        self.heads = heads
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)
        self._last_probs: np.ndarray | None = None

    def forward(self, x: Tensor, bias: np.ndarray | None = None) -> Tensor:
        squeeze = x.ndim == 2
        if squeeze:
            x = T.reshape(x, (1,) + x.shape)
        B, L, E = x.shape
        H, Dh = self.heads, E // self.heads
        qkv = T.reshape(self.qkv(x), (B, L, 3, H, Dh))
        pos = np.arange(L)
        q = T.rope(qkv[:, :, 0], pos)
        k = T.rope(qkv[:, :, 1], pos)
        v = qkv[:, :, 2]
        q = T.transpose(q, (0, 2, 1, 3))
        k = T.transpose(k, (0, 2, 3, 1))
        v = T.transpose(v, (0, 2, 1, 3))
        scores = T.matmul(q, k) * (1.0 / math.sqrt(Dh))
        if bias is not None:
            scores = scores + Tensor(bias)
        probs = T.softmax(scores, axis=-1)
        self._last_probs = probs.data
        ctx = T.transpose(T.matmul(probs, v), (0, 2, 1, 3))
        out = self.proj(T.reshape(ctx, (B, L, E)))
        return T.reshape(out, (L, E)) if squeeze else out


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class TransformerBlock(Module):
    """Pre-norm attention + feed-forward block.

    With ``cond_dim`` set, the block is DiT adaLN-zero: a zero-initialised
    projection of the conditioning vector produces shift/scale/gate for both
    sub-layers, so a fresh block is the identity map.
    """

    def __init__(self, dim: int, heads: int, ff: int, rng: np.random.Generator,
                 cond_dim: int | None = None):
        self.adaptive = cond_dim is not None
        self.norm1 = LayerNorm(dim, affine=not self.adaptive, eps=1e-6)
        self.attn = SelfAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim, affine=not self.adaptive, eps=1e-6)
        self.ff = FeedForward(dim, ff, rng)
        if self.adaptive:
            self.ada = Linear(cond_dim, 6 * dim, rng, init="zero")

    def modulation(self, cond: Tensor) -> list[Tensor]:
        """Split the adaLN projection into (shift1, scale1, gate1, shift2, scale2, gate2),
        each shaped (B, 1, E)."""
        m = self.ada(T.silu(cond))
        B = m.shape[0]
        E = m.shape[-1] // 6
        m = T.reshape(m, (B, 1, 6 * E))
        return [m[:, :, i * E:(i + 1) * E] for i in range(6)]

    def forward(self, x: Tensor, cond: Tensor | None = None, bias: np.ndarray | None = None,
                mask: np.ndarray | None = None) -> Tensor:
        if not self.adaptive:
            x = x + self.attn(self.norm1(x), bias)
            x = x + self.ff(self.norm2(x))
        else:
            if cond is None:
                raise ShapeError("adaptive block needs a conditioning vector")
            sh1, sc1, g1, sh2, sc2, g2 = self.modulation(cond)
            h = self.norm1(x) * (sc1 + 1.0) + sh1
            x = x + g1 * self.attn(h, bias)
            h = self.norm2(x) * (sc2 + 1.0) + sh2
            x = x + g2 * self.ff(h)
        if mask is not None:
            x = x * Tensor(mask)
        return x


def timestep_embedding(t: np.ndarray, dim: int, scale: float = 1000.0) -> np.ndarray:
    """Sinusoidal features of a batch of scalars t in [0, 1]; returns (B, dim)."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = scale * np.asarray(t, dtype=np.float64).reshape(-1, 1) * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(T.get_dtype())


class TimeEmbedding(Module):
    def __init__(self, dim: int, rng: np.random.Generator, freq_dim: int = 64):
        self.freq_dim = freq_dim
        self.fc1 = Linear(freq_dim, dim, rng)
        self.fc2 = Linear(dim, dim, rng)

    def forward(self, t: np.ndarray) -> Tensor:
        feats = Tensor(timestep_embedding(t, self.freq_dim))
        return self.fc2(T.silu(self.fc1(feats)))
