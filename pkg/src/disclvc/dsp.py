"""Signal processing: log-mel analysis, autocorrelation F0, Griffin-Lim, audio/mel I/O.

Framing convention: the signal is reflect-padded by ``window // 2`` on both
sides and frame ``t`` is centred on sample ``t * hop``. Only frames whose
centre lies inside the signal are kept, so ``T = ceil(len / hop)`` and a
signal of ``T * hop`` samples has exactly ``T`` frames.
"""
from __future__ import annotations

import functools
import math
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import median_filter

from .errors import ConfigError, InputError


@dataclass(frozen=True)
class MelConfig:
    sample_rate: int = 16000
    window: int = 1280
    hop: int = 320
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-5

    def __post_init__(self):
        if self.window % self.hop:
            raise ConfigError("hop must divide the window length")
        if self.n_mels < 1:
            raise ConfigError("n_mels must be positive")
        if self.fmax > self.sample_rate / 2:
            raise ConfigError("fmax exceeds Nyquist")

    @property
    def n_bins(self) -> int:
        return self.window // 2 + 1


DEFAULT_MEL = MelConfig()


@dataclass
class F0Contour:
    values: np.ndarray  # Hz per frame, 0 where unvoiced
    voiced: np.ndarray  # bool per frame

    def __len__(self) -> int:
        return len(self.values)


@dataclass
class SpeakerF0Stats:
    speaker: str
    mean: float
    std: float

    MIN_STD = 1e-3

    def __post_init__(self):
        self.std = max(float(self.std), self.MIN_STD)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(cfg: MelConfig = DEFAULT_MEL) -> np.ndarray:
    pts = np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2)
    return mel_to_hz(pts)[1:-1]


@functools.lru_cache(maxsize=8)
def mel_filterbank(cfg: MelConfig = DEFAULT_MEL) -> np.ndarray:
    """(n_mels, n_bins) triangular HTK filterbank with unit peaks."""
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    freqs = np.arange(cfg.n_bins) * cfg.sample_rate / cfg.window
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (mid - lo)
    down = (hi - freqs[None, :]) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(up, down))
    fb.setflags(write=False)
    return fb


@functools.lru_cache(maxsize=8)
def _mel_pinv(cfg: MelConfig) -> np.ndarray:
    return np.linalg.pinv(mel_filterbank(cfg))


@functools.lru_cache(maxsize=4)
def _hann(n: int) -> np.ndarray:
    # periodic Hann
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def frame_count(n_samples: int, cfg: MelConfig = DEFAULT_MEL) -> int:
    return -(-int(n_samples) // cfg.hop)


def _pad(signal: np.ndarray, cfg: MelConfig) -> np.ndarray:
    half = cfg.window // 2
    mode = "reflect" if len(signal) > half else "constant"
    return np.pad(signal, (half, half), mode=mode)


def frames(signal: np.ndarray, cfg: MelConfig = DEFAULT_MEL) -> np.ndarray:
    """(T, window) matrix of raw (unwindowed) frames."""
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim != 1 or len(x) == 0:
        raise InputError("expected a non-empty 1-D signal")
    padded = _pad(x, cfg)
    T = frame_count(len(x), cfg)
    idx = np.arange(T)[:, None] * cfg.hop + np.arange(cfg.window)[None, :]
    return padded[idx]


def stft(signal: np.ndarray, cfg: MelConfig = DEFAULT_MEL) -> np.ndarray:
    return np.fft.rfft(frames(signal, cfg) * _hann(cfg.window), axis=1)


def istft(spec: np.ndarray, cfg: MelConfig = DEFAULT_MEL, length: int | None = None) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`."""
    T = spec.shape[0]
    win = _hann(cfg.window)
    chunks = np.fft.irfft(spec, n=cfg.window, axis=1) * win
    total = (T - 1) * cfg.hop + cfg.window
    out = np.zeros(total)
    norm = np.zeros(total)
    for t in range(T):
        s = t * cfg.hop
        out[s:s + cfg.window] += chunks[t]
        norm[s:s + cfg.window] += win * win
    out = np.where(norm > 1e-8, out / np.maximum(norm, 1e-8), 0.0)
    half = cfg.window // 2
    length = T * cfg.hop if length is None else length
    out = out[half:half + length]
    if len(out) < length:
        out = np.pad(out, (0, length - len(out)))
    return out


def mel_spectrogram(signal: np.ndarray, cfg: MelConfig = DEFAULT_MEL) -> np.ndarray:
    """(T, n_mels) natural-log mel energies of the STFT magnitude, floored at ``log_floor``."""
    mag = np.abs(stft(signal, cfg))
    mel = mag @ mel_filterbank(cfg).T
    return np.log(np.maximum(mel, cfg.log_floor)).astype(np.float32)


def _normalized_autocorr(fr: np.ndarray, max_lag: int) -> np.ndarray:
    """r[t, tau] = sum x[n] x[n+tau] / sqrt(sum x[n]^2 * sum x[n+tau]^2) over the overlap."""
    W = fr.shape[1]
    nfft = 1 << int(math.ceil(math.log2(2 * W)))
    spec = np.fft.rfft(fr, n=nfft, axis=1)
    raw = np.fft.irfft(spec * np.conj(spec), n=nfft, axis=1)[:, :max_lag + 1]
    sq = fr * fr
    csum = np.concatenate([np.zeros((fr.shape[0], 1)), np.cumsum(sq, axis=1)], axis=1)
    lags = np.arange(max_lag + 1)
    e_head = csum[:, W - lags]            # sum_{n < W - tau} x[n]^2
    e_tail = csum[:, W:W + 1] - csum[:, lags]  # sum_{n >= tau} x[n]^2
    denom = np.sqrt(np.maximum(e_head * e_tail, 1e-20))
    return raw / denom


def estimate_f0(signal: np.ndarray, cfg: MelConfig = DEFAULT_MEL, f0_min: float = 60.0,
                f0_max: float = 500.0, threshold: float = 0.5, rms_floor: float = 1e-3,
                smooth: int = 5) -> F0Contour:
    """Per-frame F0 from the normalised autocorrelation of window-length frames.

    The chosen lag is the shortest local maximum within 90% of the best
    correlation in ``[sr/f0_max, sr/f0_min]`` (guards against sub-octave
    picks), refined by parabolic interpolation. A ``smooth``-frame median
    filter over each voiced run then removes isolated octave slips, which
    cluster where the window straddles two pitch targets.
    """
    if f0_min >= f0_max:
        raise ConfigError(f"f0_min ({f0_min}) must be below f0_max ({f0_max})")
    fr = frames(signal, cfg)
    fr = fr - fr.mean(axis=1, keepdims=True)
    sr = cfg.sample_rate
    lo = max(2, int(math.ceil(sr / f0_max)))
    hi = min(fr.shape[1] - 2, int(math.floor(sr / f0_min)))
    r = _normalized_autocorr(fr, hi + 1)
    rms = np.sqrt(np.mean(fr * fr, axis=1))
    T = fr.shape[0]
    values = np.zeros(T)
    voiced = np.zeros(T, dtype=bool)
    seg = r[:, lo:hi + 1]
    best = seg.max(axis=1)
    for t in range(T):
        if rms[t] < rms_floor or best[t] < threshold:
            continue
        rt = r[t]
        cand = np.arange(lo, hi + 1)
        is_peak = (rt[cand] >= rt[cand - 1]) & (rt[cand] >= rt[cand + 1]) & (rt[cand] >= 0.9 * best[t])
        if not is_peak.any():
            continue
        tau = int(cand[np.argmax(is_peak)])
        a, b, c = rt[tau - 1], rt[tau], rt[tau + 1]
        curv = a - 2 * b + c
        delta = 0.5 * (a - c) / curv if curv < 0 else 0.0
        values[t] = sr / (tau + float(np.clip(delta, -0.5, 0.5)))
        voiced[t] = True
    if smooth > 1:
        values = _median_runs(values, voiced, smooth)
    return F0Contour(values, voiced)


def _median_runs(values: np.ndarray, voiced: np.ndarray, width: int) -> np.ndarray:
    out = values.copy()
    edges = np.flatnonzero(np.diff(np.concatenate([[0], voiced.astype(np.int8), [0]])))
    for start, stop in zip(edges[::2], edges[1::2]):
        out[start:stop] = median_filter(values[start:stop], size=width, mode="nearest")
    return out


def normalize_f0(contour: F0Contour, stats: SpeakerF0Stats) -> np.ndarray:
    """Speaker z-scores on voiced frames; 0 on unvoiced frames."""
    z = (contour.values - stats.mean) / max(stats.std, SpeakerF0Stats.MIN_STD)
    return np.where(contour.voiced, z, 0.0)


def denormalize_f0(z: np.ndarray, voiced: np.ndarray, stats: SpeakerF0Stats) -> np.ndarray:
    return np.where(voiced, z * stats.std + stats.mean, 0.0)


def utterance_f0_stats(contour: F0Contour) -> SpeakerF0Stats:
    v = contour.values[contour.voiced]
    if len(v) == 0:
        return SpeakerF0Stats("utt", 0.0, 1.0)
    return SpeakerF0Stats("utt", float(v.mean()), float(v.std()))


def mel_to_linear(mel: np.ndarray, cfg: MelConfig = DEFAULT_MEL) -> np.ndarray:
    """Least-squares linear magnitude from a log-mel (floor removed, clamped at 0)."""
    energy = np.exp(np.asarray(mel, dtype=np.float64)) - cfg.log_floor
    energy = np.maximum(energy, 0.0)
    return np.maximum(energy @ _mel_pinv(cfg).T, 0.0)


def griffin_lim(mel: np.ndarray, cfg: MelConfig = DEFAULT_MEL, iters: int = 32, seed: int = 0,
                history: list | None = None, peak: float = 0.95) -> np.ndarray:
    """Waveform from a log-mel via pseudo-inverse magnitude and Griffin-Lim phase recovery.

    If ``history`` is a list, the spectral convergence of each iteration is appended.
    """
    S = mel_to_linear(mel, cfg)
    T = S.shape[0]
    length = T * cfg.hop
    if not np.any(S > 0):
        return np.zeros(length, dtype=np.float32)
    rng = np.random.default_rng(seed)
    phase = np.exp(2j * np.pi * rng.random(S.shape))
    x = istft(S * phase, cfg, length)
    s_norm = np.linalg.norm(S)
    for _ in range(iters):
        X = stft(x, cfg)
        if history is not None:
            history.append(float(np.linalg.norm(np.abs(X) - S) / s_norm))
        x = istft(S * np.exp(1j * np.angle(X)), cfg, length)
    m = np.max(np.abs(x))
    if m < 1e-12:
        return np.zeros(length, dtype=np.float32)
    return (x * (peak / m)).astype(np.float32)


# -- I/O -----------------------------------------------------------------------
def write_wav(path, signal: np.ndarray, sample_rate: int = 16000) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pcm = np.round(np.clip(np.asarray(signal, dtype=np.float64), -1.0, 1.0) * 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.tobytes())


def read_wav(path, expected_rate: int | None = 16000) -> np.ndarray:
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1 or w.getsampwidth() != 2:
            raise InputError(f"{path}: expected 16-bit mono PCM")
        if expected_rate is not None and w.getframerate() != expected_rate:
            raise InputError(f"{path}: sample rate {w.getframerate()} != {expected_rate}")
        raw = w.readframes(w.getnframes())
    return (np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32767.0)


def write_mel_csv(path, mel: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, np.asarray(mel), delimiter=",", fmt="%.6f")


def write_mel_pgm(path, mel: np.ndarray) -> None:
    """8-bit binary PGM, low frequencies at the bottom, time left to right."""
    m = np.asarray(mel, dtype=np.float64).T[::-1]
    lo, hi = m.min(), m.max()
    img = np.zeros_like(m) if hi <= lo else (m - lo) / (hi - lo)
    img = np.round(img * 255).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
