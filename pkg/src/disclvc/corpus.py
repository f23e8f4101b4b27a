"""Procedural pseudo-speech with known content, prosody and timbre factors.

Each utterance is a sequence of "units" (the content factor). Voiced units are
a harmonic stack at the planned F0 shaped by the unit's three formants, which
are scaled by the speaker's formant offsets and spectral tilt (the timbre
factor). Noise units are formant-shaped noise. Per-unit F0 targets and a
per-utterance contour shape (flat, rise or fall) form the prosody factor.
All three are drawn independently.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import dsp
from .dsp import DEFAULT_MEL, MelConfig, SpeakerF0Stats
from .errors import ConfigError, InputError
from .rng import stream

log = logging.getLogger(__name__)

SHAPES = ("flat", "rise", "fall")
CROSSFADE_S = 0.005
_BANDWIDTHS = (90.0, 130.0, 200.0)
_NOISE_BANDWIDTHS = (700.0, 1000.0, 1400.0)
_GAINS = (1.0, 0.55, 0.3)

# (F1, F2) for voiced units; chosen so neighbours differ by >25% in F1 or F2.
_VOICED_TABLE = [
    (300, 900), (300, 1500), (300, 2300), (480, 950), (480, 1550),
    (480, 2350), (720, 1150), (720, 1750), (720, 2500), (400, 2950),
]
_NOISE_TABLE = [(3400, 4800, 6400), (2100, 2900, 4100)]


@dataclass
class UnitSpec:
    unit: int
    formants: tuple[float, float, float]
    voiced: bool

    def __post_init__(self):
        f = self.formants
        if not (0 < f[0] < f[1] < f[2] < 7600):
            raise ConfigError(f"unit {self.unit}: formants must increase and stay below 7600 Hz")


@dataclass
class SpeakerSpec:
    speaker: str
    base_f0: float
    f0_range: float
    spectral_tilt: float
    formant_offsets: tuple[float, float, float]

    def __post_init__(self):
        if not 80 <= self.base_f0 <= 400:
            raise ConfigError(f"{self.speaker}: base_f0 {self.base_f0} outside [80, 400]")
        if not all(0.85 <= m <= 1.15 for m in self.formant_offsets):
            raise ConfigError(f"{self.speaker}: formant offsets outside [0.85, 1.15]")


@dataclass
class UtteranceRecord:
    id: str
    wav: str
    speaker: str
    split: str
    units: list[int]
    durations: list[int]
    f0_targets: list[float]
    shape: str
    f0: list[float]
    n_samples: int

    @property
    def n_frames(self) -> int:
        return int(sum(self.durations))

    def unit_frames(self) -> np.ndarray:
        return np.repeat(np.asarray(self.units), np.asarray(self.durations))

    def f0_contour(self) -> dsp.F0Contour:
        v = np.asarray(self.f0, dtype=np.float64)
        return dsp.F0Contour(v, v > 0)


@dataclass
class CorpusConfig:
    n_speakers: int = 12
    utterances_per_speaker: int = 80
    min_seconds: float = 1.0
    max_seconds: float = 4.0
    heldout_speakers: int = 2
    n_units: int = 12
    noise_unit_prob: float = 0.15
    min_unit_frames: int = 5
    max_unit_frames: int = 15
    contour_depth: float = 0.12
    base_f0_low: float = 100.0
    base_f0_high: float = 250.0
    formant_jitter: float = 0.07

    def validate(self) -> None:
        if self.heldout_speakers >= self.n_speakers:
            raise ConfigError("held-out speaker count must be below the total speaker count")
        if self.min_unit_frames < 2:
            raise ConfigError("units need at least 2 frames")
        if self.min_seconds <= 0 or self.max_seconds < self.min_seconds:
            raise ConfigError("invalid utterance length range")
        if not 0 < self.formant_jitter <= 0.15:
            raise ConfigError("formant jitter must be in (0, 0.15]")


def unit_inventory(n_units: int = 12, seed: int = 0) -> list[UnitSpec]:
    n_noise = max(1, n_units // 6) if n_units > 2 else 0
    n_voiced = n_units - n_noise
    voiced = list(_VOICED_TABLE[:n_voiced])
    rng = stream(seed, "units")
    while len(voiced) < n_voiced:
        f1 = float(rng.uniform(280, 800))
        voiced.append((f1, float(rng.uniform(f1 + 400, 2900))))
    units = [UnitSpec(i, (float(f1), float(f2), float(f2 + 900)), True)
             for i, (f1, f2) in enumerate(voiced)]
    for j in range(n_noise):
        f = _NOISE_TABLE[j % len(_NOISE_TABLE)]
        units.append(UnitSpec(n_voiced + j, tuple(float(x) for x in f), False))
    return units


def make_speakers(cfg: CorpusConfig, seed: int) -> list[SpeakerSpec]:
    rng = stream(seed, "speakers")
    bases = np.linspace(cfg.base_f0_low, cfg.base_f0_high, cfg.n_speakers)
    bases = bases[rng.permutation(cfg.n_speakers)]
    out = []
    for i, b in enumerate(bases):
        b = float(b + rng.uniform(-3, 3))
        offs = tuple(float(x) for x in rng.uniform(1 - cfg.formant_jitter, 1 + cfg.formant_jitter, 3))
        out.append(SpeakerSpec(f"spk{i:02d}", b, 0.35 * b, float(rng.uniform(-9.0, -3.0)), offs))
    return out


def _envelope(freqs: np.ndarray, formants, tilt_db: float, bandwidths=_BANDWIDTHS) -> np.ndarray:
    env = np.zeros_like(freqs)
    for f, bw, g in zip(formants, bandwidths, _GAINS):
        env += g / (1.0 + ((freqs - f) / bw) ** 2)
    octaves = np.log2(np.maximum(freqs, 100.0) / 100.0)
    return env * 10.0 ** (tilt_db * octaves / 20.0)


def _shaped_noise(rng, n: int, sr: int, formants, tilt_db: float, bandwidths) -> np.ndarray:
    """Unit-RMS white noise filtered by a formant envelope."""
    freqs = np.fft.rfftfreq(n, 1.0 / sr)
    shaped = np.fft.irfft(np.fft.rfft(rng.standard_normal(n)) * _envelope(freqs, formants, tilt_db, bandwidths), n=n)
    return shaped / max(np.sqrt(np.mean(shaped ** 2)), 1e-9)


def frame_f0_plan(units: list[UnitSpec], unit_ids, durations, f0_targets, shape: str,
                  depth: float = 0.12) -> np.ndarray:
    """Per-frame F0 in Hz (0 on noise units) for a unit/duration plan."""
    if shape not in SHAPES:
        raise InputError(f"unknown contour shape {shape!r}")
    out = []
    for u, d, tgt in zip(unit_ids, durations, f0_targets):
        if not units[u].voiced:
            out.append(np.zeros(d))
            continue
        pos = 2.0 * (np.arange(d) + 0.5) / d - 1.0
        slope = {"flat": 0.0, "rise": depth, "fall": -depth}[shape]
        out.append(tgt * (1.0 + slope * pos))
    return np.concatenate(out)


def synthesize_utterance(unit_ids, durations, f0_targets, shape: str, speaker: SpeakerSpec,
                         seed: int, units: list[UnitSpec] | None = None,
                         cfg: MelConfig = DEFAULT_MEL, depth: float = 0.12,
                         peak: float = 0.9, breath: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Render a unit plan for one speaker. Returns (waveform, per-frame F0 in Hz)."""
    if len(unit_ids) == 0:
        raise InputError("empty unit sequence")
    if len(durations) != len(unit_ids) or len(f0_targets) != len(unit_ids):
        raise InputError("units, durations and f0 targets must align")
    if min(durations) < 2:
        raise InputError("each unit needs at least 2 frames")
    units = units or unit_inventory(max(12, max(unit_ids) + 1))
    hop, sr = cfg.hop, cfg.sample_rate
    f0_frames = frame_f0_plan(units, unit_ids, durations, f0_targets, shape, depth)
    n = int(sum(durations)) * hop
    centers = np.arange(len(f0_frames)) * hop + hop / 2
    voiced_frames = f0_frames > 0
    # carry F0 through unvoiced stretches so the phase track stays smooth
    fill = np.interp(centers, centers[voiced_frames], f0_frames[voiced_frames]) \
        if voiced_frames.any() else np.full(len(centers), speaker.base_f0)
    f0_samples = np.interp(np.arange(n), centers, fill)
    phase = 2 * np.pi * np.cumsum(f0_samples) / sr
    rng = stream(seed, "noise")
    fade = int(round(CROSSFADE_S * sr / 2))
    out = np.zeros(n)
    starts = np.concatenate([[0], np.cumsum(durations)[:-1]]) * hop
    ends = np.cumsum(durations) * hop
    for i, (u, s, e) in enumerate(zip(unit_ids, starts, ends)):
        lo = s - fade if i > 0 else 0
        hi = e + fade if i < len(unit_ids) - 1 else n
        idx = np.arange(lo, hi)
        w = np.ones(len(idx))
        if i > 0:
            w = np.minimum(w, np.clip((idx - (s - fade) + 0.5) / (2 * fade), 0, 1))
        if i < len(unit_ids) - 1:
            w = np.minimum(w, np.clip(((e + fade) - idx - 0.5) / (2 * fade), 0, 1))
        spec = units[u]
        formants = [f * m for f, m in zip(spec.formants, speaker.formant_offsets)]
        if spec.voiced:
            f0 = f0_samples[idx]
            kmax = int(7800 // f0.min())
            seg = np.zeros(len(idx))
            for k in range(1, kmax + 1):
                fk = k * f0
                amp = np.where(fk < 7800, _envelope(fk, formants, speaker.spectral_tilt) / k, 0.0)
                seg += amp * np.sin(k * phase[idx])
            if breath > 0:
                # aspiration noise under the same envelope fills harmonic valleys
                asp = _shaped_noise(rng, len(idx), sr, formants, speaker.spectral_tilt, _BANDWIDTHS)
                seg += breath * np.sqrt(np.mean(seg ** 2)) * asp
        else:
            seg = 0.05 * _shaped_noise(rng, len(idx), sr, formants, speaker.spectral_tilt, _NOISE_BANDWIDTHS)
        out[idx] += w * seg
    m = np.max(np.abs(out))
    if m > 0:
        out *= peak / m
    return out.astype(np.float32), f0_frames


def _plan_utterance(cfg: CorpusConfig, units: list[UnitSpec], speaker: SpeakerSpec,
                    rng: np.random.Generator, hop_s: float):
    n_frames = int(round(rng.uniform(cfg.min_seconds, cfg.max_seconds) / hop_s))
    voiced_ids = [u.unit for u in units if u.voiced]
    noise_ids = [u.unit for u in units if not u.voiced]
    ids, durs = [], []
    total = 0
    while total < n_frames:
        d = int(rng.integers(cfg.min_unit_frames, cfg.max_unit_frames + 1))
        if n_frames - total - d < cfg.min_unit_frames:
            d = n_frames - total
        pool = noise_ids if (noise_ids and rng.random() < cfg.noise_unit_prob) else voiced_ids
        choices = [u for u in pool if not ids or u != ids[-1]] or voiced_ids
        ids.append(int(rng.choice(choices)))
        durs.append(d)
        total += d
    # quantised per-unit level targets keep prosody tokens learnable
    levels = np.array([-0.5, -0.25, 0.0, 0.25, 0.5])
    targets = [float(speaker.base_f0 + speaker.f0_range * rng.choice(levels)) for _ in ids]
    shape = SHAPES[int(rng.integers(len(SHAPES)))]
    return ids, durs, targets, shape


def generate_corpus(cfg: CorpusConfig, out_dir, seed: int, mel: MelConfig = DEFAULT_MEL) -> list[UtteranceRecord]:
    """Synthesise the corpus under ``out_dir`` (wavs/ + manifest.json + speakers.json)."""
    cfg.validate()
    out_dir = Path(out_dir)
    (out_dir / "wavs").mkdir(parents=True, exist_ok=True)
    units = unit_inventory(cfg.n_units, seed)
    speakers = make_speakers(cfg, seed)
    heldout = {s.speaker for s in speakers[cfg.n_speakers - cfg.heldout_speakers:]}
    records = []
    hop_s = mel.hop / mel.sample_rate
    for spk in speakers:
        for j in range(cfg.utterances_per_speaker):
            uid = f"{spk.speaker}_{j:03d}"
            rng = stream(seed, "plan", uid)
            ids, durs, targets, shape = _plan_utterance(cfg, units, spk, rng, hop_s)
            wav, f0 = synthesize_utterance(ids, durs, targets, shape, spk, seed=int(rng.integers(2**31)),
                                           units=units, cfg=mel, depth=cfg.contour_depth)
            rel = f"wavs/{uid}.wav"
            dsp.write_wav(out_dir / rel, wav, mel.sample_rate)
            records.append(UtteranceRecord(
                id=uid, wav=rel, speaker=spk.speaker,
                split="heldout" if spk.speaker in heldout else "train",
                units=ids, durations=durs, f0_targets=[round(t, 4) for t in targets], shape=shape,
                f0=[round(float(v), 4) for v in f0], n_samples=len(wav)))
    save_manifest(out_dir / "manifest.json", records)
    (out_dir / "speakers.json").write_text(json.dumps(
        {"speakers": [asdict(s) for s in speakers], "units": [asdict(u) for u in units],
         "config": asdict(cfg), "seed": seed}, indent=2))
    return records


def save_manifest(path, records: list[UtteranceRecord]) -> None:
    Path(path).write_text(json.dumps([asdict(r) for r in records], indent=1))


def load_manifest(path) -> list[UtteranceRecord]:
    return [UtteranceRecord(**r) for r in json.loads(Path(path).read_text())]


def load_speakers(corpus_dir) -> dict[str, SpeakerSpec]:
    meta = json.loads((Path(corpus_dir) / "speakers.json").read_text())
    return {s["speaker"]: SpeakerSpec(**{**s, "formant_offsets": tuple(s["formant_offsets"])})
            for s in meta["speakers"]}


def compute_speaker_stats(records: list[UtteranceRecord], f0_of=None,
                          split: str | None = "train") -> dict[str, SpeakerF0Stats]:
    """Per-speaker voiced-F0 mean/std (population), accumulated with Welford's method.

    ``f0_of(record) -> F0Contour`` selects the F0 source (ground truth by default).
    Speakers without voiced frames are skipped with a warning.
    """
    f0_of = f0_of or (lambda r: r.f0_contour())
    acc: dict[str, list[float]] = {}
    for r in records:
        if split is not None and r.split != split:
            continue
        c = f0_of(r)
        n, mu, m2 = acc.setdefault(r.speaker, [0, 0.0, 0.0])
        for x in c.values[c.voiced]:
            n += 1
            d = x - mu
            mu += d / n
            m2 += d * (x - mu)
        acc[r.speaker] = [n, mu, m2]
    stats = {}
    for spk, (n, mu, m2) in sorted(acc.items()):
        if n == 0:
            log.warning("speaker %s has no voiced frames; excluded from F0 stats", spk)
            continue
        stats[spk] = SpeakerF0Stats(spk, float(mu), float(math.sqrt(m2 / n)))
    return stats
