"""Two-stage training drivers and end-to-end conversion.

Stage 1 jointly trains the content embedding, prosody codec, duration
predictor and flow matching transformer on L_dur + L_simvq + L_fmt + L_f0.
Stage 2 freezes all of that, extracts prosody tokens with the codec and
trains the prosody mask transformer on its cross-entropy alone.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint, dsp
from . import tensor as T
from .config import RunConfig
from .config import load as load_config
from .config import save as save_config
from .corpus import UtteranceRecord, compute_speaker_stats
from .duration import DurationPredictor, duration_loss, durations_from_log, length_regulate
from .errors import ConfigError, InputError, NumericError
from .fmt import Conditioning, FlowMatchingTransformer, fmt_sample, fmt_training_loss
from .nn import Embedding, Module
from .optim import AdamW
from .pmt import ProsodyMaskTransformer, iterative_decode, pmt_training_loss
from .prosody_codec import ProsodyCodec, f0_prediction_loss, prosody_input_features
from .rng import stream
from .tensor import Tensor
from .tokenizer import ContentCodebook, TokenSequence, content_tokens, frame_features, kmeans_fit

log = logging.getLogger(__name__)

MODES = ("zero_shot_vc", "prosody_preserved", "prosody_converted")
STAGE1_FILE = "stage1.dvc"
STAGE2_FILE = "stage2.dvc"
CODEBOOK_FILE = "content_km.dvc"
CONFIG_FILE = "config.json"


# -- features -----------------------------------------------------------------
@dataclass
class UtteranceFeatures:
    id: str
    speaker: str
    split: str
    shape: str
    mel: np.ndarray
    f0: np.ndarray
    voiced: np.ndarray
    tokens: TokenSequence | None = None

    @property
    def n_frames(self) -> int:
        return self.mel.shape[0]

    def contour(self) -> dsp.F0Contour:
        return dsp.F0Contour(self.f0, self.voiced)


def analyse_wav(wav: np.ndarray) -> tuple[np.ndarray, dsp.F0Contour]:
    return dsp.mel_spectrogram(wav), dsp.estimate_f0(wav)


def extract_features(records: list[UtteranceRecord], corpus_dir, codebook: ContentCodebook | None = None
                     ) -> list[UtteranceFeatures]:
    out = []
    for r in records:
        mel, c = analyse_wav(dsp.read_wav(Path(corpus_dir) / r.wav))
        u = UtteranceFeatures(r.id, r.speaker, r.split, r.shape, mel, c.values, c.voiced)
        if codebook is not None:
            u.tokens = content_tokens(mel, codebook)
        out.append(u)
    return out


def fit_content_codebook(feats: list[UtteranceFeatures], k: int, iters: int = 50, seed: int = 0,
                         max_frames: int = 60000) -> ContentCodebook:
    pool = np.concatenate([frame_features(u.mel) for u in feats if u.split == "train"])
    if len(pool) > max_frames:
        pool = pool[stream(seed, "kmeans-subsample").choice(len(pool), max_frames, replace=False)]
    return kmeans_fit(pool, k, iters=iters, seed=seed)


def assign_tokens(feats: list[UtteranceFeatures], codebook: ContentCodebook) -> None:
    for u in feats:
        u.tokens = content_tokens(u.mel, codebook)


def speaker_stats(feats: list[UtteranceFeatures]) -> dict[str, dsp.SpeakerF0Stats]:
    """Per-speaker statistics of the estimated F0 on the training split."""
    by_id = {u.id: u for u in feats}
    shim = [UtteranceRecord(u.id, "", u.speaker, u.split, [], [], [], u.shape, [], 0) for u in feats]
    return compute_speaker_stats(shim, f0_of=lambda r: by_id[r.id].contour())


def mel_statistics(feats: list[UtteranceFeatures]) -> tuple[np.ndarray, np.ndarray]:
    m = np.concatenate([u.mel for u in feats if u.split == "train"]).astype(np.float64)
    return m.mean(axis=0), np.maximum(m.std(axis=0), 1e-3)


def utterance_norm_f0(contour: dsp.F0Contour) -> np.ndarray:
    """Codec input F0: z-scored with the utterance's own voiced statistics."""
    return dsp.normalize_f0(contour, dsp.utterance_f0_stats(contour))


# -- stage-1 model --------------------------------------------------------------
class Stage1Model(Module):
    def __init__(self, cfg: RunConfig, n_content: int, rng):
        self.content_emb = Embedding(n_content, cfg.stage1.content_dim, rng)
        self.prosody_codec = ProsodyCodec(cfg.codec, rng)
        self.duration = DurationPredictor(cfg.stage1.content_dim, cfg.duration, rng)
        self.fmt = FlowMatchingTransformer(cfg.fmt, cfg.stage1.content_dim, cfg.codec.code_dim, rng)
        self.mel_mean = Tensor(np.zeros(cfg.fmt.n_mels))
        self.mel_std = Tensor(np.ones(cfg.fmt.n_mels))

    def standardize(self, mel: np.ndarray) -> np.ndarray:
        return ((mel - self.mel_mean.data) / self.mel_std.data).astype(np.float32)

    def destandardize(self, x: np.ndarray) -> np.ndarray:
        return (x * self.mel_std.data + self.mel_mean.data).astype(np.float32)

    def prosody_features(self, mel: np.ndarray, contour: dsp.F0Contour) -> np.ndarray:
        return prosody_input_features(self.standardize(mel), utterance_norm_f0(contour), contour.voiced)

    def prosody_tokens(self, mel: np.ndarray, contour: dsp.F0Contour, durations) -> np.ndarray:
        return self.prosody_codec.tokens(self.prosody_features(mel, contour), durations)

    def predict_durations(self, content_ids) -> np.ndarray:
        was = self.training
        self.duration.eval()
        y = self.duration(self.content_emb(np.asarray(content_ids)))
        self.duration.train(was)
        return durations_from_log(y.data)


@dataclass
class Stage1Batch:
    ids: list[str]
    x1: np.ndarray          # (B, T, M) standardised mel
    pin: np.ndarray         # (B, T, 82) codec input
    f0_target: np.ndarray   # (B, T) speaker-normalised F0
    voiced: np.ndarray      # (B, T)
    frame_ids: np.ndarray   # (B, T) content id per frame
    frame_tok: np.ndarray   # (B, T) global token row per frame, pad -> N
    tok_ids: np.ndarray     # (B, N_max)
    tok_dur: np.ndarray     # (B, N_max), 0 on padding
    lengths: np.ndarray
    tok_lengths: np.ndarray
    durations: list[np.ndarray] = field(default_factory=list)


def make_stage1_batch(model: Stage1Model, utts: list[UtteranceFeatures],
                      stats: dict[str, dsp.SpeakerF0Stats]) -> Stage1Batch:
    B = len(utts)
    lengths = np.array([u.n_frames for u in utts])
    tok_lengths = np.array([len(u.tokens) for u in utts])
    Tm, Nm = int(lengths.max()), int(tok_lengths.max())
    M = model.mel_mean.shape[0]
    x1 = np.zeros((B, Tm, M), np.float32)
    pin = np.zeros((B, Tm, 82), np.float32)
    f0t = np.zeros((B, Tm), np.float32)
    voiced = np.zeros((B, Tm), np.float32)
    frame_ids = np.zeros((B, Tm), np.int64)
    n_total = int(tok_lengths.sum())
    frame_tok = np.full((B, Tm), n_total, np.int64)
    tok_ids = np.zeros((B, Nm), np.int64)
    tok_dur = np.zeros((B, Nm), np.int64)
    offset = 0
    for b, u in enumerate(utts):
        n = u.n_frames
        c = u.contour()
        x1[b, :n] = model.standardize(u.mel)
        pin[b, :n] = model.prosody_features(u.mel, c)
        st = stats.get(u.speaker) or dsp.utterance_f0_stats(c)
        f0t[b, :n] = dsp.normalize_f0(c, st)
        voiced[b, :n] = c.voiced
        frame_ids[b, :n] = u.tokens.expand()
        frame_tok[b, :n] = offset + length_regulate(np.arange(len(u.tokens)), u.tokens.durations)
        tok_ids[b, :len(u.tokens)] = u.tokens.ids
        tok_dur[b, :len(u.tokens)] = u.tokens.durations
        offset += len(u.tokens)
    return Stage1Batch([u.id for u in utts], x1, pin, f0t, voiced, frame_ids, frame_tok, tok_ids, tok_dur,
                       lengths, tok_lengths, [u.tokens.durations for u in utts])


def stage1_losses(model: Stage1Model, batch: Stage1Batch, rng) -> dict[str, Tensor]:
    codec = model.prosody_codec
    zq, _, l_vq = codec(Tensor(batch.pin), batch.lengths, batch.durations)
    zq_pad = T.concat([zq, T.zeros(1, zq.shape[1])], axis=0)
    prosody_frames = T.getitem(zq_pad, batch.frame_tok)
    f0_pred = codec.f0_head(prosody_frames)
    l_f0 = f0_prediction_loss(T.reshape(f0_pred, f0_pred.shape[:-1]), batch.f0_target, batch.voiced)
    tok_mask = (batch.tok_dur > 0).astype(np.float32)
    logdur = model.duration(model.content_emb(batch.tok_ids), tok_mask[:, :, None], rng)
    l_dur = duration_loss(logdur, batch.tok_dur, tok_mask)
    content_frames = model.content_emb(batch.frame_ids)
    l_fmt = fmt_training_loss(model.fmt, batch.x1, batch.lengths, content_frames, prosody_frames, rng)
    return {"dur": l_dur, "simvq": l_vq, "fmt": l_fmt, "f0": l_f0}


def sample_batch(pool: list, budget: int, rng, size_of) -> list:
    """Random utterances until the size budget is reached (at least one)."""
    order = rng.permutation(len(pool))
    out, total = [], 0
    for i in order:
        s = size_of(pool[i])
        if out and total + s > budget:
            break
        out.append(pool[i])
        total += s
    return out


# -- generic loop ----------------------------------------------------------------
def _write_log(fh, record: dict) -> None:
    fh.write(json.dumps(record) + "\n")
    fh.flush()


def _train(name: str, model: Module, params, loss_fn, steps: int, optim_cfg, out_dir: Path,
           seed: int, log_every: int, ckpt_every: int, resume: bool,
           history: list | None):
    out_dir.mkdir(parents=True, exist_ok=True)
    opt = AdamW(params, optim_cfg)
    last = out_dir / f"{name}_last.dvc"
    last_opt = out_dir / f"{name}_last.optim.dvc"
    start = 0
    if resume and last.exists():
        model.load_state_dict(checkpoint.load(last))
        opt.load_state_dict(checkpoint.load(last_opt))
        start = opt.step_count
        log.info("%s: resumed at step %d", name, start)
    mode = "a" if start else "w"
    t0 = time.time()
    with open(out_dir / f"{name}_log.jsonl", mode) as fh:
        for step in range(start, steps):
            rng = stream(seed, name, step)
            opt.zero_grad()
            comp, batch_ids = loss_fn(rng)
            total = None
            for v in comp.values():
                total = v if total is None else total + v
            values = {k: v.item() for k, v in comp.items()}
            loss = total.item()
            if not np.isfinite(loss):
                (out_dir / f"{name}_nan_batch.json").write_text(json.dumps(
                    {"step": step, "batch": batch_ids, "components": values}))
                raise NumericError(f"{name}: non-finite loss at step {step}: {values}")
            total.backward()
            lr = opt.lr
            gnorm = opt.step()
            rec = {"step": step + 1, "loss": loss, **values, "lr": lr, "grad_norm": gnorm,
                   "wall": round(time.time() - t0, 3)}
            if history is not None:
                history.append(rec)
            if (step + 1) % log_every == 0 or step == start or step + 1 == steps:
                _write_log(fh, rec)
                log.info("%s step %d loss %.4f %s", name, step + 1, loss,
                         " ".join(f"{k}={v:.4f}" for k, v in values.items()))
            if ckpt_every and ((step + 1) % ckpt_every == 0 or step + 1 == steps):
                checkpoint.save(last, model.state_dict())
                checkpoint.save(last_opt, opt.state_dict())
    return opt


# -- stage 1 -------------------------------------------------------------------
def build_stage1(cfg: RunConfig, n_content: int) -> Stage1Model:
    return Stage1Model(cfg, n_content, stream(cfg.seed, "init", "stage1"))


def train_stage1(cfg: RunConfig, feats: list[UtteranceFeatures], codebook: ContentCodebook, out_dir,
                 resume: bool = False, history: list | None = None, steps: int | None = None) -> Stage1Model:
    out_dir = Path(out_dir)
    train = [u for u in feats if u.split == "train"]
    if not train:
        raise InputError("no training utterances")
    if any(u.tokens is None for u in train):
        raise ConfigError("content tokens missing; fit the tokenizer first")
    stats = speaker_stats(feats)
    model = build_stage1(cfg, codebook.k)
    mean, std = mel_statistics(feats)
    model.mel_mean.data[:] = mean
    model.mel_std.data[:] = std
    model.train()
    s1 = cfg.stage1
    budget = s1.batch_frames

    def loss_fn(rng):
        utts = sample_batch(train, budget, rng, lambda u: u.n_frames)
        batch = make_stage1_batch(model, utts, stats)
        return stage1_losses(model, batch, rng), batch.ids

    _train("stage1", model, list(model.named_parameters()), loss_fn, steps or s1.steps, s1.optim, out_dir,
           cfg.seed, s1.log_every, s1.ckpt_every, resume, history)
    model.eval()
    checkpoint.save(out_dir / STAGE1_FILE, model.state_dict())
    return model


def load_stage1(cfg: RunConfig, path, n_content: int) -> Stage1Model:
    state = checkpoint.load(path)
    model = build_stage1(cfg, n_content)
    model.load_state_dict(state)
    return model.eval()


# -- stage 2 -------------------------------------------------------------------
def extract_prosody_tokens(model: Stage1Model, feats: list[UtteranceFeatures]) -> dict[str, np.ndarray]:
    model.eval()
    return {u.id: model.prosody_tokens(u.mel, u.contour(), u.tokens.durations) for u in feats}


def build_pmt(cfg: RunConfig, n_content: int) -> ProsodyMaskTransformer:
    return ProsodyMaskTransformer(cfg.pmt, n_content, cfg.codec.codebook_size, stream(cfg.seed, "init", "pmt"))


def train_stage2(cfg: RunConfig, feats: list[UtteranceFeatures], stage1: Stage1Model, n_content: int,
                 out_dir, resume: bool = False, history: list | None = None,
                 steps: int | None = None) -> ProsodyMaskTransformer:
    if stage1 is None:
        raise ConfigError("stage 2 needs a trained stage-1 model")
    out_dir = Path(out_dir)
    train = [u for u in feats if u.split == "train"]
    prosody = extract_prosody_tokens(stage1, train)
    pmt = build_pmt(cfg, n_content)
    pmt.train()
    s2 = cfg.stage2

    def loss_fn(rng):
        utts = sample_batch(train, s2.batch_tokens, rng, lambda u: len(u.tokens))
        lengths = np.array([len(u.tokens) for u in utts])
        L = int(lengths.max())
        cids = np.zeros((len(utts), L), np.int64)
        pids = np.zeros((len(utts), L), np.int64)
        for b, u in enumerate(utts):
            cids[b, :lengths[b]] = u.tokens.ids
            pids[b, :lengths[b]] = prosody[u.id]
        return {"pmt": pmt_training_loss(pmt, cids, pids, lengths, rng)}, [u.id for u in utts]

    _train("stage2", pmt, list(pmt.named_parameters()), loss_fn, steps or s2.steps, s2.optim, out_dir,
           cfg.seed, s2.log_every, s2.ckpt_every, resume, history)
    pmt.eval()
    checkpoint.save(out_dir / STAGE2_FILE, checkpoint.with_prefix("pmt.", pmt.state_dict()))
    return pmt


def load_stage2(cfg: RunConfig, path, n_content: int) -> ProsodyMaskTransformer:
    pmt = build_pmt(cfg, n_content)
    pmt.load_state_dict(checkpoint.strip_prefix("pmt.", checkpoint.load(path)))
    return pmt.eval()


# -- conversion -------------------------------------------------------------------
@dataclass
class System:
    cfg: RunConfig
    codebook: ContentCodebook
    stage1: Stage1Model
    pmt: ProsodyMaskTransformer | None = None


def load_system(ckpt_dir, need_pmt: bool = False) -> System:
    d = Path(ckpt_dir)
    for f in (CONFIG_FILE, CODEBOOK_FILE, STAGE1_FILE):
        if not (d / f).exists():
            raise ConfigError(f"{d / f} not found")
    cfg = load_config(d / CONFIG_FILE)
    cb = ContentCodebook.load(d / CODEBOOK_FILE)
    s1 = load_stage1(cfg, d / STAGE1_FILE, cb.k)
    pmt = None
    if (d / STAGE2_FILE).exists():
        pmt = load_stage2(cfg, d / STAGE2_FILE, cb.k)
    elif need_pmt:
        raise ConfigError(f"{d / STAGE2_FILE} not found; train stage 2 first")
    return System(cfg, cb, s1, pmt)


@dataclass
class ConversionResult:
    wav: np.ndarray
    mel: np.ndarray
    content_ids: np.ndarray
    prosody_ids: np.ndarray
    durations: np.ndarray
    prompt_frames: int
    info: dict = field(default_factory=dict)


def _analyse(wav: np.ndarray, cb: ContentCodebook):
    mel, contour = analyse_wav(wav)
    return mel, contour, content_tokens(mel, cb)


def convert_arrays(system: System, mode: str, source: np.ndarray, reference: np.ndarray, seed: int = 0,
                   drop: str | None = None, vocode: bool = True) -> ConversionResult:
    if mode not in MODES:
        raise InputError(f"unknown mode {mode!r}; expected one of {MODES}")
    if drop not in (None, "content", "prosody"):
        raise InputError(f"drop must be 'content' or 'prosody', got {drop!r}")
    cfg, cb, s1 = system.cfg, system.codebook, system.stage1
    codes = s1.prosody_codec.vq.codes().data
    src_mel, src_c, src_tok = _analyse(source, cb)
    ref_mel, ref_c, ref_tok = _analyse(reference, cb)
    ref_pros = s1.prosody_tokens(ref_mel, ref_c, ref_tok.durations)
    if mode == "prosody_converted":
        if system.pmt is None:
            raise ConfigError("prosody_converted needs a stage-2 checkpoint")
        content_all = np.concatenate([ref_tok.ids, src_tok.ids])
        pros = iterative_decode(system.pmt, content_all, ref_pros, len(src_tok), cfg.pmt,
                                rng=stream(seed, "convert", "pmt"))
    else:
        pros = s1.prosody_tokens(src_mel, src_c, src_tok.durations)
    durs = s1.predict_durations(src_tok.ids)

    P = min(ref_mel.shape[0], cfg.convert.prompt_max_frames)
    ref_cframes = length_regulate(ref_tok.ids, ref_tok.durations)[:P]
    ref_pframes = length_regulate(ref_pros, ref_tok.durations)[:P]
    src_cframes = length_regulate(src_tok.ids, durs)
    src_pframes = length_regulate(pros, durs)
    N = len(src_cframes)
    emb = s1.content_emb.weight.data
    content = emb[np.concatenate([ref_cframes, src_cframes])][None]
    prosody = codes[np.concatenate([ref_pframes, src_pframes])][None]
    context = np.zeros((1, P + N, ref_mel.shape[1]), np.float32)
    context[0, :P] = s1.standardize(ref_mel[:P])
    mask = np.zeros((1, P + N), np.float32)
    mask[0, P:] = 1.0
    cond = Conditioning(Tensor(content), Tensor(prosody), context, mask, np.array([P + N]))
    one = np.ones(1, dtype=bool)
    x = fmt_sample(s1.fmt, cond, cfg.fmt.steps, cfg.fmt.guidance, stream(seed, "convert", "fmt"),
                   drop_content=one if drop == "content" else None,
                   drop_prosody=one if drop == "prosody" else None)
    mel = s1.destandardize(x[0, P:])
    wav = dsp.griffin_lim(mel, iters=cfg.convert.griffin_lim_iters, seed=seed) if vocode else np.zeros(0)
    return ConversionResult(wav, mel, src_tok.ids, pros, durs, P,
                            {"mode": mode, "drop": drop, "seed": seed, "source_frames": src_mel.shape[0],
                             "reference_prosody": ref_pros.tolist()})


def convert(system: System, mode: str, source_path, reference_path, out_path, seed: int = 0,
            drop: str | None = None) -> ConversionResult:
    from .evaluate import f0_pearson
    for p in (source_path, reference_path):
        if not Path(p).exists():
            raise InputError(f"{p} does not exist")
    src = dsp.read_wav(source_path)
    res = convert_arrays(system, mode, src, dsp.read_wav(reference_path), seed, drop)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    dsp.write_wav(out_path, res.wav)
    r, flag = f0_pearson(dsp.estimate_f0(src), dsp.estimate_f0(res.wav))
    sidecar = {**res.info, "source": str(source_path), "reference": str(reference_path),
               "content_ids": res.content_ids.tolist(), "prosody_ids": res.prosody_ids.tolist(),
               "durations": res.durations.tolist(), "output_frames": int(res.mel.shape[0]),
               "prompt_frames": res.prompt_frames, "f0_corr_source": r, "f0_corr_flag": flag}
    out_path.with_suffix(".json").write_text(json.dumps(sidecar, indent=1))
    return res


def save_run_files(cfg: RunConfig, out_dir, codebook: ContentCodebook | None = None) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out_dir / CONFIG_FILE)
    if codebook is not None:
        codebook.save(out_dir / CODEBOOK_FILE)
