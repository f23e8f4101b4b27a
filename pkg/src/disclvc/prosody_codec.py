"""VQ prosody encoder: frame-level conv stacks, inverse length regulation, SimVQ
bottleneck and the F0 supervision head."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import InputError, NumericError
from .nn import Conv1d, LayerNorm, Linear, Module
from .tensor import Tensor

log = logging.getLogger(__name__)

N_INPUT = 82  # 80 log-mel + normalised F0 + voiced flag


@dataclass
class CodecConfig:
    hidden: int = 96
    code_dim: int = 64
    codebook_size: int = 128
    kernel: int = 3
    commitment: float = 0.25
    simvq: bool = True
    proj_init: float = 0.01  # W starts near zero so Q W sits inside the cloud of encoder outputs


def prosody_input_features(mel_std: np.ndarray, f0_z: np.ndarray, voiced: np.ndarray) -> np.ndarray:
    """(T, 82): standardised log-mel, normalised F0 (0 when unvoiced), voiced flag."""
    return np.concatenate([mel_std, f0_z[:, None], voiced[:, None].astype(np.float64)],
                          axis=1).astype(np.float32)


def segment_mean(x: Tensor, seg: np.ndarray, n_seg: int) -> Tensor:
    """Mean of the rows of ``x`` (R, H) grouped by integer ``seg`` (R,) into (n_seg, H)."""
    seg = np.asarray(seg, dtype=np.int64)
    counts = np.bincount(seg, minlength=n_seg).astype(x.data.dtype)
    if np.any(counts == 0):
        raise InputError("every segment needs at least one frame")
    sums = T._scatter_rows((n_seg,) + x.shape[1:], seg, x.data)
    out = sums / counts[:, None]
    return T.custom_op(out, (x,), lambda g: ((g / counts[:, None])[seg],))


def inverse_length_regulate(frames: Tensor, durations) -> Tensor:
    """Mean-pool frame rows (T, H) over each token's span; returns (N, H)."""
    durations = np.asarray(durations, dtype=np.int64)
    if durations.sum() != frames.shape[0]:
        raise InputError(f"durations sum to {durations.sum()} but there are {frames.shape[0]} frames")
    seg = np.repeat(np.arange(len(durations)), durations)
    return segment_mean(frames, seg, len(durations))


class ConvStack(Module):
    """(conv k -> layer norm -> GELU) x 2."""

    def __init__(self, n_in: int, hidden: int, kernel: int, rng):
        self.conv1 = Conv1d(n_in, hidden, kernel, rng)
        self.norm1 = LayerNorm(hidden)
        self.conv2 = Conv1d(hidden, hidden, kernel, rng)
        self.norm2 = LayerNorm(hidden)

    def forward(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        m = Tensor(mask) if mask is not None else None
        x = T.gelu(self.norm1(self.conv1(x)))
        if m is not None:
            x = x * m
        x = T.gelu(self.norm2(self.conv2(x)))
        if m is not None:
            x = x * m
        return x


class VectorQuantizer(Module):
    """SimVQ: frozen random codebook Q reparameterised by a trainable linear map W.

    With ``simvq=False`` it is a plain VQ layer whose codebook rows are trained
    directly (W is not used); the loss keeps the same two-term form.
    """

    def __init__(self, size: int, dim: int, rng, commitment: float = 0.25, simvq: bool = True,
                 proj_init: float = 1.0):
        self.simvq = simvq
        self.commitment = commitment
        self.codebook = Tensor(rng.standard_normal((size, dim)), requires_grad=not simvq)
        if simvq:
            self.proj = Linear(dim, dim, rng, bias=False)
            self.proj.weight.data *= proj_init

    def codes(self) -> Tensor:
        """Effective code vectors (V, D): Q W, or the raw codebook for plain VQ."""
        return T.matmul(self.codebook, self.proj.weight) if self.simvq else self.codebook

    def lookup(self, ids) -> Tensor:
        return T.getitem(self.codes(), np.asarray(ids, dtype=np.int64))

    def nearest(self, z: np.ndarray) -> np.ndarray:
        cw = self.codes().data
        d = (z * z).sum(1)[:, None] - 2.0 * z @ cw.T + (cw * cw).sum(1)[None, :]
        return d.argmin(axis=1)

    def forward(self, z: Tensor) -> tuple[Tensor, np.ndarray, Tensor]:
        """Quantise rows of z (N, D). Returns (straight-through z_q, ids, loss).

        loss = mean_rows[ lam * ||q W - sg(z)||^2 + ||z - sg(q W)||^2 ]
        """
        if not np.all(np.isfinite(z.data)):
            raise NumericError("non-finite input to the quantiser")
        ids = self.nearest(z.data)
        zq = self.lookup(ids)
        n = z.shape[0]
        code_term = T.tsum((zq - z.detach()) ** 2) * (self.commitment / n)
        commit_term = T.tsum((z - zq.detach()) ** 2) * (1.0 / n)
        z_st = z + (zq - z).detach()
        return z_st, ids, code_term + commit_term


class ProsodyCodec(Module):
    def __init__(self, cfg: CodecConfig, rng):
        self.cfg = cfg
        self.stack1 = ConvStack(N_INPUT, cfg.hidden, cfg.kernel, rng)
        self.stack2 = ConvStack(cfg.hidden, cfg.hidden, cfg.kernel, rng)
        self.to_code = Linear(cfg.hidden, cfg.code_dim, rng)
        self.vq = VectorQuantizer(cfg.codebook_size, cfg.code_dim, rng, cfg.commitment, cfg.simvq, cfg.proj_init)
        self.f0_head = Linear(cfg.code_dim, 1, rng)

    def conv_stack_encode(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        return self.stack2(self.stack1(x, mask), mask)

    def encode_tokens(self, feats: Tensor, lengths, durations: list[np.ndarray]) -> Tensor:
        """Frame features (B, T, 82) -> pre-quantisation token vectors (sum N_b, D)."""
        B, Tm, _ = feats.shape
        mask = (np.arange(Tm)[None, :] < np.asarray(lengths)[:, None]).astype(T.get_dtype())[:, :, None]
        h = self.conv_stack_encode(feats, mask)
        flat_idx = np.concatenate([b * Tm + np.arange(n) for b, n in enumerate(lengths)])
        frames = T.getitem(T.reshape(h, (B * Tm, -1)), flat_idx)
        seg, offset = [], 0
        for d in durations:
            seg.append(offset + np.repeat(np.arange(len(d)), d))
            offset += len(d)
        pooled = segment_mean(frames, np.concatenate(seg), offset)
        return self.to_code(pooled)

    def forward(self, feats: Tensor, lengths, durations):
        """Returns (z_q straight-through (N, D), ids per utterance, SimVQ loss)."""
        z = self.encode_tokens(feats, lengths, durations)
        zq, ids, loss = self.vq(z)
        splits = np.cumsum([len(d) for d in durations])[:-1]
        return zq, np.split(ids, splits), loss

    def tokens(self, feats: np.ndarray, durations) -> np.ndarray:
        """Prosody ids for a single utterance (inference, no graph needed)."""
        x = Tensor(feats[None])
        z = self.encode_tokens(x, [feats.shape[0]], [np.asarray(durations)])
        return self.vq.nearest(z.data)


def f0_prediction_loss(pred: Tensor, target: np.ndarray, voiced: np.ndarray) -> Tensor:
    """Smooth-L1 (beta 1) between predicted and target normalised F0, mean over voiced frames."""
    v = np.asarray(voiced, dtype=T.get_dtype()).reshape(pred.shape)
    n = float(v.sum())
    if n == 0:
        log.warning("no voiced frames in batch; F0 loss is 0")
        return T.tsum(pred * 0.0)
    d = pred - Tensor(np.asarray(target).reshape(pred.shape))
    return T.tsum(T.smooth_l1(d) * Tensor(v)) * (1.0 / n)


def codebook_stats(ids, size: int) -> tuple[np.ndarray, float]:
    """Usage histogram and perplexity exp(H) of the empirical id distribution."""
    flat = np.concatenate([np.ravel(i) for i in ids]) if isinstance(ids, (list, tuple)) else np.ravel(ids)
    counts = np.bincount(flat.astype(np.int64), minlength=size)
    p = counts / max(counts.sum(), 1)
    nz = p[p > 0]
    return counts, float(np.exp(-(nz * np.log(nz)).sum()))
