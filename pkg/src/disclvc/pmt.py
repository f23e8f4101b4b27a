"""Prosody mask transformer: masked prediction of prosody tokens from content
tokens and a prosody prompt, decoded by iterative confidence-based unmasking."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import InputError
from .nn import Embedding, LayerNorm, Linear, Module, TransformerBlock, key_padding_bias, length_mask
from .rng import gumbel
from .tensor import Tensor, parameter


@dataclass
class PMTConfig:
    layers: int = 6
    heads: int = 6
    embed: int = 192
    ff: int = 768
    cond_drop: float = 0.2
    steps: int = 16
    guidance: float = 2.5
    top_k: int = 40
    temp_start: float = 1.5
    temp_floor: float = 0.05


def sine_mask_fraction(u: float) -> float:
    if not 0.0 < u <= 1.0:
        raise InputError(f"u must lie in (0, 1], got {u}")
    return math.sin(math.pi * u / 2.0)


def apply_training_mask(ids, u: float, rng, mask_id: int) -> tuple[np.ndarray, np.ndarray]:
    """Mask ceil(sin(pi u / 2) L) positions chosen uniformly; returns (masked ids, bool mask)."""
    ids = np.asarray(ids, dtype=np.int64)
    L = len(ids)
    if L == 0:
        raise InputError("cannot mask an empty sequence")
    n = min(L, math.ceil(sine_mask_fraction(u) * L))
    pos = rng.choice(L, size=n, replace=False)
    mask = np.zeros(L, dtype=bool)
    mask[pos] = True
    return np.where(mask, mask_id, ids), mask


def remaining_masked(target_len: int, step: int, steps: int) -> int:
    """Positions still masked after decode step ``step`` (1-based)."""
    if step >= steps:
        return 0
    return min(target_len, math.ceil(target_len * math.sin(math.pi / 2 * (1.0 - step / steps)) - 1e-9))


class ProsodyMaskTransformer(Module):
    def __init__(self, cfg: PMTConfig, n_content: int, n_prosody: int, rng):
        self.cfg = cfg
        self.n_prosody = n_prosody
        self.mask_id = n_prosody
        self.content_emb = Embedding(n_content, cfg.embed, rng, scale=0.02)
        self.prosody_emb = Embedding(n_prosody + 1, cfg.embed, rng, scale=0.02)
        self.null_content = parameter(rng.normal(0, 0.02, size=cfg.embed))
        self.blocks = [TransformerBlock(cfg.embed, cfg.heads, cfg.ff, rng) for _ in range(cfg.layers)]
        self.norm = LayerNorm(cfg.embed)
        self.head = Linear(cfg.embed, n_prosody, rng)

    def forward(self, content_ids, prosody_ids, lengths=None, drop_content=None) -> Tensor:
        """content_ids/prosody_ids (B, L) -> logits (B, L, V)."""
        content_ids = np.atleast_2d(content_ids)
        prosody_ids = np.atleast_2d(prosody_ids)
        B, L = content_ids.shape
        lengths = np.full(B, L) if lengths is None else np.asarray(lengths)
        c = self.content_emb(content_ids)
        if drop_content is not None and np.any(drop_content):
            d = np.asarray(drop_content, dtype=T.get_dtype()).reshape(-1, 1, 1)
            c = c * Tensor(1.0 - d) + self.null_content * Tensor(np.broadcast_to(d, (B, L, 1)))
        h = c + self.prosody_emb(prosody_ids)
        bias = key_padding_bias(lengths, L)
        valid = length_mask(lengths, L)
        for block in self.blocks:
            h = block(h, None, bias, valid)
        return self.head(self.norm(h))


def pmt_training_loss(model: ProsodyMaskTransformer, content_ids: np.ndarray, prosody_ids: np.ndarray,
                      lengths, rng) -> Tensor:
    """Cross-entropy over masked positions of a padded batch (B, L)."""
    B, L = content_ids.shape
    masked = np.full((B, L), model.mask_id, dtype=np.int64)
    weights = np.zeros((B, L), dtype=np.float32)
    for b in range(B):
        n = int(lengths[b])
        u = 1.0 - rng.uniform(0.0, 1.0)  # (0, 1]
        masked[b, :n], m = apply_training_mask(prosody_ids[b, :n], u, rng, model.mask_id)
        weights[b, :n] = m
    drop = rng.uniform(size=B) < model.cfg.cond_drop
    logits = model(content_ids, masked, lengths, drop)
    targets = np.where(weights > 0, prosody_ids, 0)
    return T.cross_entropy(logits, targets, weights)


@dataclass
class DecodeTrace:
    masked_counts: list[int] = field(default_factory=list)


def _top_k_sample(logits: np.ndarray, k: int, temp: float, rng) -> np.ndarray:
    """Sample one id per row from the top-k of ``logits / temp``."""
    z = logits / temp
    if k < z.shape[-1]:
        kth = np.partition(z, -k, axis=-1)[:, -k][:, None]
        z = np.where(z >= kth, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    u = rng.uniform(size=(z.shape[0], 1))
    ids = (np.cumsum(p, axis=-1) < u).sum(axis=-1)
    return np.minimum(ids, z.shape[-1] - 1)


def iterative_decode(model, content_ids, prompt_prosody, target_len: int, cfg: PMTConfig | None = None,
                     rng=None, trace: DecodeTrace | None = None, temperature: float | None = None,
                     guidance: float | None = None) -> np.ndarray:
    """Decode ``target_len`` prosody ids following a prompt.

    ``content_ids`` covers prompt + target (prompt first). ``temperature``
    pins the sampling temperature (used for exact-recall checks); otherwise it
    anneals linearly from ``temp_start`` to 0, floored at ``temp_floor``.
    """
    cfg = cfg or model.cfg
    rng = rng if rng is not None else np.random.default_rng(0)
    prompt = np.asarray(prompt_prosody, dtype=np.int64)
    content_ids = np.asarray(content_ids, dtype=np.int64)
    P = len(prompt)
    if len(content_ids) != P + target_len:
        raise InputError(f"content ids ({len(content_ids)}) must cover prompt ({P}) + target ({target_len})")
    if target_len == 0:
        return np.zeros(0, dtype=np.int64)
    V = model.n_prosody
    mask_id = model.mask_id
    seq = np.concatenate([prompt, np.full(target_len, mask_id, dtype=np.int64)])
    s = cfg.guidance if guidance is None else guidance
    k = min(cfg.top_k, V)
    steps = cfg.steps
    for i in range(1, steps + 1):
        still = np.where(seq[P:] == mask_id)[0] + P
        if len(still) == 0:
            break
        lc = model(content_ids[None], seq[None]).data[0].astype(np.float64)
        if s != 1.0:
            lu = model(content_ids[None], seq[None], None, np.ones(1, dtype=bool)).data[0].astype(np.float64)
            logits = lu + s * (lc - lu)
        else:
            logits = lc
        tau = cfg.temp_start * (1.0 - i / steps)
        temp = temperature if temperature is not None else max(tau, cfg.temp_floor)
        sub = logits[still]
        sampled = _top_k_sample(sub, k, temp, rng)
        logp = sub - sub.max(axis=-1, keepdims=True)
        logp = logp - np.log(np.exp(logp).sum(axis=-1, keepdims=True))
        conf = logp[np.arange(len(still)), sampled] + max(tau, 0.0) * gumbel(rng, len(still))
        n_keep_masked = remaining_masked(target_len, i, steps)
        n_unmask = max(0, len(still) - n_keep_masked)
        order = np.argsort(-conf, kind="stable")[:n_unmask]
        seq[still[order]] = sampled[order]
        if trace is not None:
            trace.masked_counts.append(int((seq[P:] == mask_id).sum()))
    return seq[P:].copy()
