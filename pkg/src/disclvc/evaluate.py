"""Objective proxy metrics: F0 correlation, token-level content accuracy,
classifier-embedding speaker similarity, contour-shape agreement and the
condition-ablation dump."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint, dsp
from . import tensor as T
from .corpus import SHAPES
from .errors import ConfigError, InputError
from .nn import Conv1d, Linear, Module
from .optim import AdamW, AdamWConfig
from .rng import stream
from .tensor import Tensor
from .tokenizer import ContentCodebook, content_tokens

log = logging.getLogger(__name__)

SPEAKER_CLS_FILE = "speaker_cls.dvc"


# -- F0 correlation ------------------------------------------------------------
def _voiced_track(c: dsp.F0Contour) -> np.ndarray:
    return np.asarray(c.values, dtype=np.float64)[np.asarray(c.voiced, dtype=bool)]


def resample_track(x: np.ndarray, n: int) -> np.ndarray:
    if len(x) == n:
        return x.copy()
    if len(x) == 1:
        return np.full(n, x[0])
    return np.interp(np.linspace(0, len(x) - 1, n), np.arange(len(x)), x)


def f0_pearson(a: dsp.F0Contour, b: dsp.F0Contour) -> tuple[float | None, str]:
    """Pearson r between voiced F0 of ``a`` and ``b`` resampled to a's voiced count.

    Returns (r, flag): flag is "ok", "zero_variance" (r reported as 0) or
    "no_voiced" (r is None).
    """
    if len(a) == 0 or len(b) == 0:
        raise InputError("empty contour")
    xa, xb = _voiced_track(a), _voiced_track(b)
    if len(xa) == 0 or len(xb) == 0:
        return None, "no_voiced"
    xb = resample_track(xb, len(xa))
    if len(xa) < 2 or xa.std() < 1e-9 or xb.std() < 1e-9:
        return 0.0, "zero_variance"
    return float(np.corrcoef(xa, xb)[0, 1]), "ok"


# -- content accuracy ------------------------------------------------------------
def levenshtein(a, b) -> int:
    a, b = list(a), list(b)
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def sequence_accuracy(a, b) -> float:
    n = max(len(a), len(b))
    return 1.0 if n == 0 else 1.0 - levenshtein(a, b) / n


def content_accuracy(source_wav: np.ndarray, converted_wav: np.ndarray, codebook: ContentCodebook) -> float:
    a = content_tokens(dsp.mel_spectrogram(source_wav), codebook).ids
    b = content_tokens(dsp.mel_spectrogram(converted_wav), codebook).ids
    return sequence_accuracy(a, b)


# -- speaker classifier ------------------------------------------------------------
ACTIVE_DB = 40.0


def active_frames(mel: np.ndarray) -> np.ndarray:
    """Frames whose mean log-mel energy is within ACTIVE_DB of the loudest frame."""
    e = mel.mean(axis=1)
    return e >= e.max() - ACTIVE_DB / 20.0 * math.log(10.0)


def speaker_input(mel: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Level-normalised mel (mean active log-energy removed) and the active-frame mask."""
    act = active_frames(mel)
    x = mel - mel[act].mean()
    return x.astype(np.float32), act


class SpeakerClassifier(Module):
    def __init__(self, n_mels: int, hidden: int, n_speakers: int, rng):
        self.conv1 = Conv1d(n_mels, hidden, 3, rng)
        self.conv2 = Conv1d(hidden, hidden, 3, rng)
        self.out = Linear(hidden, n_speakers, rng)
        self.trained = Tensor(np.zeros(1))

    def embed(self, x: Tensor, act: np.ndarray) -> Tensor:
        """x (B, T, M), act (B, T) 0/1 -> mean over active frames of the conv features."""
        h = T.gelu(self.conv2(T.gelu(self.conv1(x))))
        a = np.asarray(act, dtype=T.get_dtype())
        pooled = T.tsum(h * Tensor(a[:, :, None]), axis=1)
        return pooled * Tensor(1.0 / np.maximum(a.sum(axis=1, keepdims=True), 1.0))

    def forward(self, x: Tensor, act: np.ndarray) -> Tensor:
        return self.out(self.embed(x, act))

    def embedding(self, mel: np.ndarray) -> np.ndarray:
        if self.trained.data[0] < 1:
            raise ConfigError("speaker classifier has not been trained")
        x, act = speaker_input(mel)
        return self.embed(Tensor(x[None]), act[None]).data[0].astype(np.float64)


def _crop_batch(items, crop: int, rng):
    xs = np.zeros((len(items), crop, items[0][0].shape[1]), np.float32)
    acts = np.zeros((len(items), crop), np.float32)
    for b, (x, act, _) in enumerate(items):
        n = min(crop, len(x))
        s = int(rng.integers(0, len(x) - n + 1))
        xs[b, :n] = x[s:s + n]
        acts[b, :n] = act[s:s + n]
    return xs, acts


def train_speaker_classifier(mels: list[np.ndarray], speakers: list[str], hidden: int = 64, steps: int = 800,
                             batch: int = 16, lr: float = 2e-3, seed: int = 0, crop: int = 64):
    """Fit the classifier on random crops; returns (model, label list, train accuracy)."""
    labels = sorted(set(speakers))
    index = {s: i for i, s in enumerate(labels)}
    items = [(*speaker_input(m), index[s]) for m, s in zip(mels, speakers)]
    model = SpeakerClassifier(mels[0].shape[1], hidden, len(labels), stream(seed, "init", "speaker_cls"))
    opt = AdamW(model.named_parameters(), AdamWConfig(lr_start=lr, lr_end=lr * 0.1, decay_steps=steps,
                                                      weight_decay=0.0, grad_clip=5.0))
    for step in range(steps):
        rng = stream(seed, "speaker_cls", step)
        pick = [items[i] for i in rng.choice(len(items), size=min(batch, len(items)), replace=False)]
        xs, acts = _crop_batch(pick, crop, rng)
        opt.zero_grad()
        loss = T.cross_entropy(model(Tensor(xs), acts), np.array([p[2] for p in pick]))
        loss.backward()
        opt.step()
    correct = 0
    for x, act, y in items:
        correct += int(model(Tensor(x[None]), act[None]).data[0].argmax() == y)
    acc = correct / len(items)
    model.trained.data[0] = 1.0
    if acc < 0.95:
        log.warning("speaker classifier train accuracy %.3f is below 0.95", acc)
    return model, labels, acc


def save_speaker_classifier(model: SpeakerClassifier, path) -> None:
    checkpoint.save(path, checkpoint.with_prefix("speaker_cls.", model.state_dict()))


def load_speaker_classifier(path) -> SpeakerClassifier:
    state = checkpoint.strip_prefix("speaker_cls.", checkpoint.load(path))
    k, n_in, hidden = state["conv1.weight"].shape
    model = SpeakerClassifier(n_in, hidden, state["out.weight"].shape[1], np.random.default_rng(0))
    model.load_state_dict(state)
    return model


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def speaker_similarity(wav_a: np.ndarray, wav_b: np.ndarray, classifier: SpeakerClassifier) -> float:
    ea = classifier.embedding(dsp.mel_spectrogram(wav_a))
    eb = classifier.embedding(dsp.mel_spectrogram(wav_b))
    return cosine(ea, eb)


# -- contour shape -------------------------------------------------------------
def slope_feature(c: dsp.F0Contour, max_step: float = 0.06) -> float:
    """Median frame-to-frame log-F0 change across adjacent voiced frames.

    Steps larger than ``max_step`` (unit boundaries, octave errors) are ignored.
    """
    v = np.asarray(c.voiced, dtype=bool)
    f = np.log(np.maximum(np.asarray(c.values, dtype=np.float64), 1e-3))
    both = v[1:] & v[:-1]
    d = (f[1:] - f[:-1])[both]
    d = d[np.abs(d) < max_step]
    return float(np.median(d)) if len(d) else 0.0


@dataclass
class ShapeClassifier:
    centroids: dict[str, float]

    @classmethod
    def fit(cls, contours: list[dsp.F0Contour], tags: list[str]) -> "ShapeClassifier":
        feats = np.array([slope_feature(c) for c in contours])
        tags = np.asarray(tags)
        return cls({s: float(feats[tags == s].mean()) for s in SHAPES if np.any(tags == s)})

    def predict(self, c: dsp.F0Contour) -> str:
        x = slope_feature(c)
        return min(self.centroids, key=lambda s: abs(self.centroids[s] - x))


# -- reports ---------------------------------------------------------------------
@dataclass
class PairMetrics:
    source: str
    reference: str
    mode: str
    f0_corr: float | None
    f0_flag: str
    content_accuracy: float
    speaker_sim_reference: float | None = None
    speaker_sim_source: float | None = None
    mel_distance: float | None = None
    shape_pred: str | None = None
    shape_reference: str | None = None
    shape_source: str | None = None


@dataclass
class EvalReport:
    pairs: list[PairMetrics] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def aggregates(self) -> dict:
        out = {}
        for name in ("f0_corr", "content_accuracy", "speaker_sim_reference", "speaker_sim_source",
                     "mel_distance"):
            vals = [getattr(p, name) for p in self.pairs if getattr(p, name) is not None]
            if vals:
                out[name] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)), "n": len(vals)}
        sims = [(p.speaker_sim_reference, p.speaker_sim_source) for p in self.pairs
                if p.speaker_sim_reference is not None and p.speaker_sim_source is not None]
        if sims:
            out["speaker_closer_to_reference"] = float(np.mean([a > b for a, b in sims]))
        shapes = [p for p in self.pairs if p.shape_pred is not None and p.shape_reference is not None]
        if shapes:
            out["shape_agreement_reference"] = float(np.mean([p.shape_pred == p.shape_reference for p in shapes]))
        return out

    def to_json(self) -> dict:
        return {"pairs": [asdict(p) for p in self.pairs], "aggregates": self.aggregates(),
                "metadata": self.metadata, "proxies": {
                    "content_accuracy": "token edit similarity (WER proxy)",
                    "speaker_similarity": "speaker-classifier embedding cosine (SECS proxy)"}}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))


def mel_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Mean absolute log-mel difference after linear time alignment of b to a."""
    idx = np.round(np.linspace(0, len(b) - 1, len(a))).astype(int)
    return float(np.mean(np.abs(a - b[idx])))


def evaluate_pair(system, mode: str, source: np.ndarray, reference: np.ndarray, seed: int = 0,
                  classifier: SpeakerClassifier | None = None, shape_cls: ShapeClassifier | None = None,
                  names=("", ""), tags=(None, None), drop: str | None = None) -> tuple[PairMetrics, object]:
    from .pipeline import convert_arrays
    res = convert_arrays(system, mode, source, reference, seed, drop)
    out_c = dsp.estimate_f0(res.wav)
    r, flag = f0_pearson(dsp.estimate_f0(source), out_c)
    m = PairMetrics(names[0], names[1], mode, r, flag, content_accuracy(source, res.wav, system.codebook))
    if classifier is not None:
        e = classifier.embedding(dsp.mel_spectrogram(res.wav))
        m.speaker_sim_reference = cosine(e, classifier.embedding(dsp.mel_spectrogram(reference)))
        m.speaker_sim_source = cosine(e, classifier.embedding(dsp.mel_spectrogram(source)))
    m.mel_distance = mel_distance(res.mel, dsp.mel_spectrogram(source))
    if shape_cls is not None:
        m.shape_pred = shape_cls.predict(out_c)
    m.shape_source, m.shape_reference = tags
    return m, res


def ablation_dump(system, source: np.ndarray, reference: np.ndarray, drop: str | None, out_prefix,
                  seed: int = 0, mode: str = "prosody_preserved"):
    """Convert with one condition nulled and write ``<prefix>.csv`` and ``<prefix>.pgm``."""
    from .pipeline import convert_arrays
    res = convert_arrays(system, mode, source, reference, seed, drop)
    out_prefix = Path(out_prefix)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    dsp.write_mel_csv(out_prefix.with_suffix(".csv"), res.mel)
    dsp.write_mel_pgm(out_prefix.with_suffix(".pgm"), res.mel)
    dsp.write_wav(out_prefix.with_suffix(".wav"), res.wav)
    return res
