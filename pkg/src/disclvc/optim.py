"""AdamW with a linear learning-rate decay schedule."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


@dataclass
class AdamWConfig:
    lr_start: float = 2e-4
    lr_end: float = 5e-5
    decay_steps: int = 600_000
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    weight_decay: float = 0.01
    grad_clip: float = 1.0


def lr_at(cfg: AdamWConfig, step: int) -> float:
    """Learning rate for the update that follows ``step`` completed updates."""
    if cfg.decay_steps <= 0 or step >= cfg.decay_steps:
        return cfg.lr_end
    frac = step / cfg.decay_steps
    return cfg.lr_start + (cfg.lr_end - cfg.lr_start) * frac


class AdamW:
    def __init__(self, named_params, cfg: AdamWConfig | None = None):
        self.cfg = cfg or AdamWConfig()
        self.params: list[tuple[str, Tensor]] = list(named_params)
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}
        self.step_count = 0

    @property
    def lr(self) -> float:
        return lr_at(self.cfg, self.step_count)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def grad_norm(self) -> float:
        sq = 0.0
        for _, p in self.params:
            if p.grad is not None:
                sq += float(np.sum(p.grad.astype(np.float64) ** 2))
        return float(np.sqrt(sq))

    def step(self) -> float:
        """Apply one update; returns the pre-clip global gradient norm."""
        c = self.cfg
        lr = self.lr
        norm = self.grad_norm()
        clip = 1.0
        if c.grad_clip and norm > c.grad_clip:
            clip = c.grad_clip / (norm + 1e-12)
        t = self.step_count + 1
        bc1 = 1.0 - c.beta1 ** t
        bc2 = 1.0 - c.beta2 ** t
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad * clip if clip != 1.0 else p.grad
            m, v = self.m[name], self.v[name]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + c.eps)
            if c.weight_decay:
                update = update + c.weight_decay * p.data
            p.data -= (lr * update).astype(p.data.dtype)
        self.step_count = t
        return norm

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {"step": np.array(self.step_count, dtype=np.float32)}
        for name, _ in self.params:
            state[f"m.{name}"] = self.m[name]
            state[f"v.{name}"] = self.v[name]
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.step_count = int(state["step"])
        for name, _ in self.params:
            self.m[name] = np.array(state[f"m.{name}"], dtype=np.float32)
            self.v[name] = np.array(state[f"v.{name}"], dtype=np.float32)
