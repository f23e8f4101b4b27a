"""Content tokens: cepstral frame features, K-means codebook, run-length dedup."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.fft import dct

from . import checkpoint
from .errors import InputError

FEATURE_RECIPE = "mfcc1-13-cmvn"
N_FEATURES = 13


@dataclass
class ContentCodebook:
    centroids: np.ndarray  # (K, F)
    recipe: str = FEATURE_RECIPE

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    def save(self, path) -> None:
        checkpoint.save(path, {"content_km.centroids": self.centroids})

    @classmethod
    def load(cls, path) -> "ContentCodebook":
        return cls(checkpoint.load(path)["content_km.centroids"].astype(np.float64))


@dataclass
class TokenSequence:
    ids: np.ndarray
    durations: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.durations = np.asarray(self.durations, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.ids)

    def expand(self) -> np.ndarray:
        return np.repeat(self.ids, self.durations)


def frame_features(mel: np.ndarray) -> np.ndarray:
    """Cepstral coefficients 1..13 of each log-mel frame, normalised per utterance.

    Dimensions with (near) zero variance across the utterance map to 0.
    """
    mel = np.asarray(mel, dtype=np.float64)
    cep = dct(mel, type=2, norm="ortho", axis=1)[:, 1:1 + N_FEATURES]
    mu = cep.mean(axis=0, keepdims=True)
    sd = cep.std(axis=0, keepdims=True)
    return np.where(sd > 1e-8, (cep - mu) / np.maximum(sd, 1e-8), 0.0)


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_fit(features: np.ndarray, k: int, iters: int = 50, seed: int = 0,
               history: list | None = None) -> ContentCodebook:
    """k-means++ seeding followed by Lloyd iterations.

    Empty clusters are re-seeded with the point farthest from its centroid.
    ``history`` (if given) receives the inertia after each assignment step.
    """
    x = np.asarray(features, dtype=np.float64)
    if len(np.unique(x, axis=0)) < k:
        raise InputError(f"need at least {k} distinct points, got {len(np.unique(x, axis=0))}")
    rng = np.random.default_rng(seed)
    n = len(x)
    centers = [x[rng.integers(n)]]
    d2 = _sq_dists(x, np.array(centers))[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        idx = int(rng.choice(n, p=d2 / total)) if total > 0 else int(rng.integers(n))
        centers.append(x[idx])
        d2 = np.minimum(d2, _sq_dists(x, x[idx:idx + 1])[:, 0])
    c = np.array(centers)
    for _ in range(iters):
        d = _sq_dists(x, c)
        assign = d.argmin(axis=1)
        inertia = float(d[np.arange(n), assign].sum())
        if history is not None:
            history.append(inertia)
        new = c.copy()
        counts = np.bincount(assign, minlength=k)
        sums = np.zeros_like(c)
        np.add.at(sums, assign, x)
        nz = counts > 0
        new[nz] = sums[nz] / counts[nz, None]
        if not nz.all():
            far = d[np.arange(n), assign]
            for j in np.flatnonzero(~nz):
                i = int(far.argmax())
                new[j] = x[i]
                far[i] = -1.0
        if np.allclose(new, c, rtol=0, atol=1e-12):
            c = new
            break
        c = new
    return ContentCodebook(c)


def inertia(features: np.ndarray, cb: ContentCodebook) -> float:
    d = _sq_dists(np.asarray(features, dtype=np.float64), cb.centroids)
    return float(d.min(axis=1).sum())


def tokenize(features: np.ndarray, cb: ContentCodebook) -> np.ndarray:
    """Nearest-centroid id per frame; ties go to the lowest id."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != cb.centroids.shape[1]:
        raise InputError(f"feature dim {x.shape} does not match codebook {cb.centroids.shape}")
    return _sq_dists(x, cb.centroids).argmin(axis=1)


def dedup(raw_ids) -> TokenSequence:
    """Collapse runs of equal ids; run lengths become durations."""
    raw = np.asarray(raw_ids, dtype=np.int64)
    if raw.size == 0:
        raise InputError("cannot deduplicate an empty token stream")
    change = np.flatnonzero(np.diff(raw)) + 1
    starts = np.concatenate([[0], change])
    lengths = np.diff(np.concatenate([starts, [len(raw)]]))
    return TokenSequence(raw[starts], lengths)


def expand(seq: TokenSequence) -> np.ndarray:
    return seq.expand()


def content_tokens(mel: np.ndarray, cb: ContentCodebook) -> TokenSequence:
    return dedup(tokenize(frame_features(mel), cb))
