"""Duration predictor and length regulator."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import InputError
from .nn import Conv1d, LayerNorm, Linear, Module, dropout
from .tensor import Tensor


@dataclass
class DurationConfig:
    hidden: int = 96
    kernel: int = 3
    dropout: float = 0.5


class DurationPredictor(Module):
    """conv -> LN -> ReLU -> dropout, twice, then a linear head giving log(1 + d)."""

    def __init__(self, n_in: int, cfg: DurationConfig, rng):
        self.cfg = cfg
        self.conv1 = Conv1d(n_in, cfg.hidden, cfg.kernel, rng)
        self.norm1 = LayerNorm(cfg.hidden)
        self.conv2 = Conv1d(cfg.hidden, cfg.hidden, cfg.kernel, rng)
        self.norm2 = LayerNorm(cfg.hidden)
        self.out = Linear(cfg.hidden, 1, rng)

    def forward(self, x: Tensor, mask: np.ndarray | None = None, rng=None) -> Tensor:
        """x (B, N, E) or (N, E); returns log-durations with the trailing axis dropped."""
        m = Tensor(mask) if mask is not None else None
        h = T.relu(self.norm1(self.conv1(x)))
        h = dropout(h, self.cfg.dropout, rng, self.training)
        if m is not None:
            h = h * m
        h = T.relu(self.norm2(self.conv2(h)))
        h = dropout(h, self.cfg.dropout, rng, self.training)
        y = self.out(h)
        return T.reshape(y, y.shape[:-1])


def log_duration_target(durations) -> np.ndarray:
    return np.log1p(np.asarray(durations, dtype=np.float64))


def durations_from_log(y) -> np.ndarray:
    """Inference rule: max(1, round(exp(y) - 1))."""
    d = np.rint(np.expm1(np.asarray(y, dtype=np.float64)))
    return np.maximum(d, 1).astype(np.int64)


def duration_loss(pred: Tensor, durations, weights: np.ndarray | None = None) -> Tensor:
    """MSE between predicted log-durations and log(1 + d), optionally over a 0/1 mask."""
    target = log_duration_target(durations)
    if target.shape != pred.shape:
        raise InputError(f"duration targets {target.shape} do not match predictions {pred.shape}")
    d = pred - Tensor(target)
    if weights is None:
        return T.mean(d * d)
    w = np.asarray(weights, dtype=T.get_dtype())
    return T.tsum(d * d * Tensor(w)) * (1.0 / max(float(w.sum()), 1.0))


def _repeat_index(durations) -> np.ndarray:
    durations = np.asarray(durations, dtype=np.int64)
    if durations.ndim != 1 or np.any(durations < 1):
        raise InputError("durations must be positive integers")
    return np.repeat(np.arange(len(durations)), durations)


def length_regulate(x, durations):
    """Repeat token i ``durations[i]`` times. Works on id arrays and on (N, E) tensors."""
    idx = _repeat_index(durations)
    if isinstance(x, Tensor):
        return T.getitem(x, idx)
    return np.asarray(x)[idx]
