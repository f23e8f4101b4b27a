"""Flow matching transformer: masked mel infilling trained with OT-CFM and
sampled by Euler integration with classifier-free guidance."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import InputError
from .nn import Linear, Module, TimeEmbedding, TransformerBlock, key_padding_bias, length_mask
from .tensor import Tensor, parameter


@dataclass
class FMTConfig:
    layers: int = 6
    heads: int = 6
    embed: int = 192
    ff: int = 384
    cond_drop: float = 0.2
    steps: int = 16
    guidance: float = 1.0
    n_mels: int = 80
    mask_min: float = 0.5
    mask_max: float = 1.0


@dataclass
class Conditioning:
    """Frame-rate conditioning for a batch. Arrays are (B, T, .) except ``mask`` (B, T)
    with 1 on frames to generate. ``content``/``prosody`` may be Tensors so that
    gradients reach the embedding tables during training."""
    content: Tensor
    prosody: Tensor
    context: np.ndarray
    mask: np.ndarray
    lengths: np.ndarray

    def __post_init__(self):
        shapes = {self.content.shape[:2], self.prosody.shape[:2], self.context.shape[:2], self.mask.shape}
        if len(shapes) != 1:
            raise InputError(f"conditioning streams disagree on (B, T): {sorted(shapes)}")


def ot_interpolate(x0: np.ndarray, x1: np.ndarray, t) -> tuple[np.ndarray, np.ndarray]:
    """x_t = (1 - t) x0 + t x1 and the target velocity x1 - x0. ``t`` broadcasts."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > 1):
        raise InputError("t must lie in [0, 1]")
    if x0.shape != x1.shape:
        raise InputError(f"x0 {x0.shape} and x1 {x1.shape} differ")
    return (1.0 - t) * x0 + t * x1, x1 - x0


def cfg_combine(v_cond, v_uncond, s: float):
    return v_uncond + s * (v_cond - v_uncond)


class FlowMatchingTransformer(Module):
    def __init__(self, cfg: FMTConfig, content_dim: int, prosody_dim: int, rng):
        self.cfg = cfg
        n_in = 2 * cfg.n_mels + content_dim + prosody_dim + 1
        self.in_proj = Linear(n_in, cfg.embed, rng)
        self.time = TimeEmbedding(cfg.embed, rng)
        self.blocks = [TransformerBlock(cfg.embed, cfg.heads, cfg.ff, rng, cond_dim=cfg.embed)
                       for _ in range(cfg.layers)]
        self.final_ada = Linear(cfg.embed, 2 * cfg.embed, rng, init="zero")
        self.out = Linear(cfg.embed, cfg.n_mels, rng)
        self.null_content = parameter(rng.normal(0, 0.02, size=content_dim))
        self.null_prosody = parameter(rng.normal(0, 0.02, size=prosody_dim))
        self.null_context = parameter(rng.normal(0, 0.02, size=cfg.n_mels))

    def _drop(self, x, null: Tensor, drop: np.ndarray | None) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if drop is None or not np.any(drop):
            return x
        d = np.asarray(drop, dtype=T.get_dtype()).reshape(-1, 1, 1)
        return x * Tensor(1.0 - d) + null * Tensor(np.broadcast_to(d, x.shape[:2] + (1,)))

    def forward(self, x_t, t, cond: Conditioning, drop_content=None, drop_prosody=None,
                drop_context=None) -> Tensor:
        """Velocity (B, T, n_mels). ``drop_*`` are per-sample booleans selecting the
        learned null embedding for that stream."""
        x_t = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
        B, Tm, _ = x_t.shape
        # unit-scale conditioning: code vectors and embeddings live at very different norms
        content = T.layer_norm(self._drop(cond.content, self.null_content, drop_content), eps=1e-5)
        prosody = T.layer_norm(self._drop(cond.prosody, self.null_prosody, drop_prosody), eps=1e-5)
        context = self._drop(cond.context, self.null_context, drop_context)
        mask_ch = Tensor(np.asarray(cond.mask, dtype=T.get_dtype())[:, :, None])
        h = self.in_proj(T.concat([x_t, context, content, prosody, mask_ch], axis=-1))
        temb = self.time(np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (B,)))
        bias = key_padding_bias(cond.lengths, Tm)
        valid = length_mask(cond.lengths, Tm)
        for block in self.blocks:
            h = block(h, temb, bias, valid)
        mod = T.reshape(self.final_ada(T.silu(temb)), (B, 1, 2 * self.cfg.embed))
        shift, scale = mod[:, :, :self.cfg.embed], mod[:, :, self.cfg.embed:]
        h = T.layer_norm(h, eps=1e-6) * (scale + 1.0) + shift
        return self.out(h) * Tensor(valid)


def span_mask(length: int, ratio: float, rng) -> np.ndarray:
    """Contiguous span of round(ratio * length) frames (at least one) at a random offset."""
    n = int(min(length, max(1, round(ratio * length))))
    start = int(rng.integers(0, length - n + 1))
    m = np.zeros(length, dtype=np.float32)
    m[start:start + n] = 1.0
    return m


def fmt_training_loss(model: FlowMatchingTransformer, x1: np.ndarray, lengths, content, prosody,
                      rng, mask: np.ndarray | None = None) -> Tensor:
    """OT-CFM loss on masked frames for a padded batch of standardised mels x1 (B, T, M).

    Per sample: t ~ U(0,1), x0 ~ N(0, I), one contiguous mask span with ratio
    U(mask_min, mask_max), and with probability cond_drop all three conditions
    replaced by their null embeddings. ``mask`` overrides the span draw.
    """
    cfg = model.cfg
    B, Tm, M = x1.shape
    lengths = np.asarray(lengths)
    t = rng.uniform(0.0, 1.0, size=B)
    x0 = rng.standard_normal(x1.shape)
    if mask is None:
        mask = np.zeros((B, Tm), dtype=np.float32)
        for b in range(B):
            mask[b, :lengths[b]] = span_mask(int(lengths[b]), rng.uniform(cfg.mask_min, cfg.mask_max), rng)
    drop = rng.uniform(size=B) < cfg.cond_drop
    x_t, u = ot_interpolate(x0, x1, t[:, None, None])
    context = x1 * (1.0 - mask[:, :, None])
    cond = Conditioning(content, prosody, context, mask, lengths)
    v = model(x_t, t, cond, drop, drop, drop)
    n = float(mask.sum()) * M
    if n == 0:
        return T.tsum(v * 0.0)
    err = v - Tensor(u)
    return T.tsum(err * err * Tensor(mask[:, :, None])) * (1.0 / n)


def fmt_sample(model, cond: Conditioning, steps: int = 16, guidance: float = 1.0, seed_rng=None,
               drop_content=None, drop_prosody=None) -> np.ndarray:
    """Euler integration from noise on masked frames; unmasked frames are pinned to the context.

    ``model`` is any callable (x, t, cond, drop_content, drop_prosody, drop_context) -> v.
    With guidance 1 the unconditional pass cannot change the result, so it is skipped.
    """
    B, Tm, M = cond.context.shape
    rng = seed_rng if seed_rng is not None else np.random.default_rng(0)
    m = np.asarray(cond.mask, dtype=np.float32)[:, :, None]
    keep = 1.0 - m
    ctx = np.asarray(cond.context, dtype=np.float32)
    x = (rng.standard_normal((B, Tm, M)) * m + ctx * keep).astype(np.float32)
    all_null = np.ones(B, dtype=bool)
    dt = 1.0 / steps
    for i in range(steps):
        t = np.full(B, i / steps)
        v = _as_array(model(x, t, cond, drop_content, drop_prosody, None))
        if guidance != 1.0:
            vu = _as_array(model(x, t, cond, all_null, all_null, all_null))
            v = cfg_combine(v, vu, guidance)
        x = (x + dt * v).astype(np.float32)
        x = x * m + ctx * keep
    return x


def _as_array(v) -> np.ndarray:
    return v.data if isinstance(v, Tensor) else np.asarray(v)
