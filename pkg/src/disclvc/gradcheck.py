"""Finite-difference verification of autodiff gradients.

``grad_check`` compares ``Tensor.backward`` against central differences. Checks
run in float64 by default so that rounding noise in the forward pass does not
swamp the difference quotient; the backward formulas under test are the same
code paths used in float32 training.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import UsageError
from .tensor import Tensor, precision


@dataclass
class GradCheckReport:
    name: str
    max_rel_err: float
    tol: float
    per_tensor: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_err) and self.max_rel_err <= self.tol)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: max rel err {self.max_rel_err:.2e} (tol {self.tol:.0e})"


def _unique(tensors: Iterable[Tensor]) -> list[Tensor]:
    seen, out = set(), []
    for t in tensors:
        if id(t) not in seen:
            seen.add(id(t))
            out.append(t)
    return out


def grad_check(f: Callable[[], Tensor], wrt: Sequence[Tensor], tol: float = 1e-3,
               h: float = 1e-3, dtype=np.float64, max_coords: int = 32, seed: int = 0,
               cast: Iterable[Tensor] = (), name: str = "f",
               names: Sequence[str] | None = None) -> GradCheckReport:
    """Check gradients of scalar ``f()`` w.r.t. each tensor in ``wrt``.

    At most ``max_coords`` randomly chosen entries per tensor are perturbed.
    ``cast`` lists extra tensors (buffers, frozen weights) that ``f`` reads and
    that must follow the check precision. The relative error of a tensor is
    ``max|analytic - numeric| / max(max|analytic|, max|numeric|)``.
    """
    wrt = list(wrt)
    everything = _unique(list(wrt) + list(cast))
    saved_data = [t.data for t in everything]
    saved_grad = [t.grad for t in wrt]
    rng = np.random.default_rng(seed)
    names = list(names) if names is not None else [t.name or f"arg{i}" for i, t in enumerate(wrt)]
    per: dict[str, float] = {}
    try:
        with precision(dtype):
            for t in everything:
                t.data = np.array(t.data, dtype=dtype)
            for t in wrt:
                t.grad = None
            out = f()
            if out.size != 1:
                raise UsageError("grad_check needs a scalar-valued function")
            out.backward()
            for tname, t in zip(names, wrt):
                analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
                flat = t.data.reshape(-1)
                n = flat.size
                coords = np.arange(n) if n <= max_coords else rng.choice(n, max_coords, replace=False)
                a = analytic.reshape(-1)[coords]
                num = np.empty(len(coords))
                for j, idx in enumerate(coords):
                    orig = flat[idx]
                    flat[idx] = orig + h
                    fp = f().item()
                    flat[idx] = orig - h
                    fm = f().item()
                    flat[idx] = orig
                    num[j] = (fp - fm) / (2 * h)
                scale = max(np.max(np.abs(a)), np.max(np.abs(num)), 1e-12)
                per[tname] = float(np.max(np.abs(a - num)) / scale)
    finally:
        for t, d in zip(everything, saved_data):
            t.data = d
        for t, g in zip(wrt, saved_grad):
            t.grad = g
    worst = max(per.values()) if per else 0.0
    return GradCheckReport(name, worst, tol, per)


def module_check(name: str, module, f: Callable[[], Tensor], inputs: Sequence[Tensor] = (),
                 tol: float = 1e-3, **kw) -> GradCheckReport:
    """Gradient check w.r.t. every parameter of ``module`` plus ``inputs``."""
    named = list(module.named_parameters())
    wrt = [t for _, t in named] + list(inputs)
    names = [n for n, _ in named] + [f"input{i}" for i in range(len(inputs))]
    cast = [t for _, t in module.named_tensors()]
    return grad_check(f, wrt, tol=tol, cast=cast, name=name, names=names, **kw)


# -- registry of network blocks checked by ``disclvc grad-check`` -------------------
def _proj(rng, shape):
    return Tensor(rng.normal(size=shape))


def registered_checks(tol: float = 1e-3) -> list[Callable[[], GradCheckReport]]:
    """Zero-argument thunks, one per network block, each returning a report."""
    from . import nn
    from . import tensor as T
    from .duration import DurationConfig, DurationPredictor, duration_loss
    from .evaluate import SpeakerClassifier
    from .fmt import Conditioning, FlowMatchingTransformer, FMTConfig
    from .pmt import PMTConfig, ProsodyMaskTransformer
    from .prosody_codec import CodecConfig, ConvStack, ProsodyCodec, f0_prediction_loss
    from .tensor import parameter

    def randomize_zero_init(module, rng):
        # adaLN-zero projections start at 0, which would hide their gradient paths
        for name, p in module.named_parameters():
            if not np.any(p.data):
                p.data = rng.normal(0, 0.2, size=p.shape).astype(p.data.dtype)

    def dit_block():
        rng = np.random.default_rng(10)
        block = nn.TransformerBlock(8, 2, 16, rng, cond_dim=6)
        randomize_zero_init(block, rng)
        x = parameter(rng.normal(size=(2, 4, 8)))
        cond, proj = _proj(rng, (2, 6)), _proj(rng, (2, 4, 8))
        bias = nn.key_padding_bias([4, 3], 4)
        return module_check("dit_block", block, lambda: (block(x, cond, bias) * proj).sum(), [x], tol)

    def pre_ln_block():
        rng = np.random.default_rng(11)
        block = nn.TransformerBlock(8, 2, 16, rng)
        x = parameter(rng.normal(size=(1, 5, 8)))
        proj = _proj(rng, (1, 5, 8))
        return module_check("transformer_block", block, lambda: (block(x) * proj).sum(), [x], tol)

    def conv_stack():
        rng = np.random.default_rng(12)
        stack = ConvStack(5, 6, 3, rng)
        x = parameter(rng.normal(size=(2, 7, 5)))
        proj = _proj(rng, (2, 7, 6))
        return module_check("codec_conv_stack", stack, lambda: (stack(x) * proj).sum(), [x], tol)

    def codec():
        # the quantiser's straight-through path is not a true derivative, so the
        # differentiable parts are checked here and the routing separately
        rng = np.random.default_rng(13)
        c = ProsodyCodec(CodecConfig(hidden=8, code_dim=4, codebook_size=6), rng)
        x = parameter(rng.normal(size=(2, 6, 82)))
        durs = [np.array([2, 1, 3]), np.array([4, 1])]
        proj = _proj(rng, (5, 4))
        ids = np.array([0, 5, 2, 2])
        target = rng.normal(size=(4,))

        def f():
            z = c.encode_tokens(x, [6, 5], durs)
            pred = T.reshape(c.f0_head(c.vq.lookup(ids)), (4,))
            return (z * proj).sum() + f0_prediction_loss(pred, target, np.array([1, 1, 0, 1]))
        return module_check("prosody_codec", c, f, [x], tol)

    def duration():
        rng = np.random.default_rng(14)
        dp = DurationPredictor(6, DurationConfig(hidden=8), rng).eval()
        x = parameter(rng.normal(size=(1, 5, 6)))
        d = np.array([[1, 3, 2, 5, 1]])
        return module_check("duration_predictor", dp, lambda: duration_loss(dp(x), d), [x], tol)

    def fmt():
        rng = np.random.default_rng(15)
        cfg = FMTConfig(layers=1, heads=2, embed=8, ff=16, n_mels=80)
        model = FlowMatchingTransformer(cfg, 4, 3, rng)
        randomize_zero_init(model, rng)
        x = parameter(rng.normal(size=(1, 6, 80)))
        content = parameter(rng.normal(size=(1, 6, 4)))
        mask = np.array([[0, 0, 1, 1, 1, 1]], dtype=np.float32)
        cond = Conditioning(content, Tensor(rng.normal(size=(1, 6, 3))),
                            rng.normal(size=(1, 6, 80)) * (1 - mask[:, :, None]), mask, np.array([6]))
        proj = _proj(rng, (1, 6, 80))
        drop = np.array([True])
        return module_check("fmt_forward", model,
                            lambda: (model(x, np.array([0.3]), cond) * proj).sum()
                            + (model(x, np.array([0.7]), cond, drop, drop, drop) * proj).sum(),
                            [x, content], tol, h=1e-5)

    def pmt():
        rng = np.random.default_rng(16)
        model = ProsodyMaskTransformer(PMTConfig(layers=1, heads=2, embed=8, ff=16), 5, 7, rng)
        cids, pids = np.array([[0, 3, 4, 1]]), np.array([[2, 7, 7, 5]])
        targets = np.array([[0, 1, 6, 0]])
        w = np.array([[0, 1, 1, 0]], dtype=float)
        return module_check("pmt_forward", model,
                            lambda: T.cross_entropy(model(cids, pids), targets, w)
                            + T.cross_entropy(model(cids, pids, None, np.array([True])), targets, w), (), tol,
                            h=1e-5)

    def speaker():
        rng = np.random.default_rng(17)
        model = SpeakerClassifier(10, 6, 3, rng)
        x = parameter(rng.normal(size=(2, 5, 10)))
        act = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]], dtype=float)
        return module_check("speaker_classifier", model,
                            lambda: T.cross_entropy(model(x, act), np.array([0, 2])), [x], tol)

    return [dit_block, pre_ln_block, conv_stack, codec, duration, fmt, pmt, speaker]


def run_all(tol: float = 1e-3) -> list[GradCheckReport]:
    return [check() for check in registered_checks(tol)]
