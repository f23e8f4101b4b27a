"""Command-line entry point: ``disclvc <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__, config, corpus, dsp, evaluate, pipeline
from .errors import DisclError, UsageError

log = logging.getLogger("disclvc")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n\n{self.format_usage()}")


def _manifest_record(cmd: str, argv: list[str], seed: int | None) -> dict:
    return {"command": cmd, "argv": argv, "seed": seed,
            "versions": {"disclvc": __version__, "python": platform.python_version(),
                         "numpy": np.__version__, "scipy": scipy.__version__},
            "threads": os.environ.get("DVC_THREADS", "unset")}


def _write_run_files(out_dir: Path, cfg: config.RunConfig, cmd: str, argv: list[str]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    config.save(cfg, out_dir / f"{cmd}.config.json")
    (out_dir / f"{cmd}.manifest.json").write_text(
        json.dumps(_manifest_record(cmd, argv, cfg.seed), indent=2, sort_keys=True))


def _load_cfg(args) -> config.RunConfig:
    overrides = {"seed": getattr(args, "seed", None)}
    return config.load(getattr(args, "config", None), overrides)


def _corpus_paths(path: str) -> tuple[Path, Path]:
    p = Path(path)
    manifest = p / "manifest.json" if p.is_dir() else p
    if not manifest.exists():
        raise DisclError(f"corpus manifest {manifest} not found")
    return manifest, manifest.parent


def _features(manifest: Path, corpus_dir: Path, codebook=None):
    return pipeline.extract_features(corpus.load_manifest(manifest), corpus_dir, codebook)


# -- subcommands -------------------------------------------------------------------
def cmd_gen_corpus(args, argv):
    cfg = _load_cfg(args)
    out = Path(args.out or cfg.corpus_dir)
    recs = corpus.generate_corpus(cfg.corpus, out, cfg.seed)
    _write_run_files(out, cfg, "gen-corpus", argv)
    print(f"wrote {len(recs)} utterances to {out}")


def cmd_fit_tokenizer(args, argv):
    cfg = _load_cfg(args)
    manifest, cdir = _corpus_paths(args.corpus)
    feats = _features(manifest, cdir)
    cb = pipeline.fit_content_codebook(feats, cfg.tokenizer.k, cfg.tokenizer.iters, cfg.seed,
                                       cfg.tokenizer.max_frames)
    out = Path(args.out)
    pipeline.save_run_files(cfg, out, cb)
    _write_run_files(out, cfg, "fit-tokenizer", argv)
    print(f"codebook with K={cb.k} written to {out / pipeline.CODEBOOK_FILE}")


def cmd_train(args, argv):
    out = Path(args.out)
    cfg = _load_cfg(args)
    manifest, cdir = _corpus_paths(args.corpus)
    cb_path = out / pipeline.CODEBOOK_FILE
    if cb_path.exists():
        cb = pipeline.ContentCodebook.load(cb_path)
        feats = _features(manifest, cdir, cb)
    else:
        feats = _features(manifest, cdir)
        cb = pipeline.fit_content_codebook(feats, cfg.tokenizer.k, cfg.tokenizer.iters, cfg.seed,
                                           cfg.tokenizer.max_frames)
        pipeline.assign_tokens(feats, cb)
    if args.steps:
        stage = cfg.stage1 if args.stage == 1 else cfg.stage2
        stage.steps = args.steps
    pipeline.save_run_files(cfg, out, cb)
    _write_run_files(out, cfg, f"train-stage{args.stage}", argv)
    if args.stage == 1:
        pipeline.train_stage1(cfg, feats, cb, out, resume=args.resume)
        tr = [u for u in feats if u.split == "train"]
        sc = cfg.speaker_classifier
        cls, _, acc = evaluate.train_speaker_classifier([u.mel for u in tr], [u.speaker for u in tr], sc.hidden,
                                                        sc.steps, sc.batch, sc.lr, cfg.seed)
        evaluate.save_speaker_classifier(cls, out / evaluate.SPEAKER_CLS_FILE)
        print(f"stage 1 done; speaker classifier train accuracy {acc:.3f}")
    else:
        if not (out / pipeline.STAGE1_FILE).exists():
            raise DisclError(f"{out / pipeline.STAGE1_FILE} not found; train stage 1 first")
        s1 = pipeline.load_stage1(cfg, out / pipeline.STAGE1_FILE, cb.k)
        pipeline.train_stage2(cfg, feats, s1, cb.k, out, resume=args.resume)
        print("stage 2 done")


def cmd_convert(args, argv):
    system = pipeline.load_system(args.ckpt, need_pmt=args.mode == "prosody_converted")
    res = pipeline.convert(system, args.mode, args.source, args.reference, args.out, args.seed, args.drop)
    print(f"wrote {args.out} ({res.mel.shape[0]} frames)")


def cmd_ablate(args, argv):
    system = pipeline.load_system(args.ckpt)
    ref = args.reference or args.source
    res = evaluate.ablation_dump(system, dsp.read_wav(args.source), dsp.read_wav(ref), args.drop, args.out,
                                 args.seed)
    print(f"wrote {Path(args.out).with_suffix('.csv')} and .pgm ({res.mel.shape[0]} frames)")


def cmd_eval(args, argv):
    ckpt = Path(args.ckpt)
    pairs = json.loads(Path(args.pairs).read_text())
    need_pmt = any(p.get("mode") == "prosody_converted" for p in pairs)
    system = pipeline.load_system(ckpt, need_pmt=need_pmt)
    cls_path = ckpt / evaluate.SPEAKER_CLS_FILE
    shape_cls = None
    if args.corpus:
        manifest, cdir = _corpus_paths(args.corpus)
        tr = [u for u in _features(manifest, cdir) if u.split == "train"]
        shape_cls = evaluate.ShapeClassifier.fit([u.contour() for u in tr], [u.shape for u in tr])
    classifier = evaluate.load_speaker_classifier(cls_path) if cls_path.exists() else None
    report = evaluate.EvalReport(metadata={"ckpt": str(ckpt), "seed": args.seed})
    for p in pairs:
        m, _ = evaluate.evaluate_pair(system, p.get("mode", "prosody_preserved"), dsp.read_wav(p["source"]),
                                      dsp.read_wav(p["reference"]), args.seed, classifier, shape_cls,
                                      (p["source"], p["reference"]),
                                      (p.get("source_shape"), p.get("reference_shape")))
        report.pairs.append(m)
    report.save(args.out)
    print(json.dumps(report.aggregates(), indent=1))


def cmd_grad_check(args, argv):
    from .gradcheck import run_all
    reports = run_all(args.tol)
    for r in reports:
        print(r.line())
    if not all(r.passed for r in reports):
        raise DisclError("gradient check failed")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="disclvc", description="Desk-scale controllable voice conversion.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, seed=True):
        sp.add_argument("--config", help="JSON run config (unknown keys rejected)")
        if seed:
            sp.add_argument("--seed", type=int)

    g = sub.add_parser("gen-corpus", help="synthesise the pseudo-speech corpus")
    common(g)
    g.add_argument("--out")
    g.set_defaults(fn=cmd_gen_corpus)

    f = sub.add_parser("fit-tokenizer", help="fit the content K-means codebook")
    common(f)
    f.add_argument("--corpus", required=True)
    f.add_argument("--out", required=True)
    f.set_defaults(fn=cmd_fit_tokenizer)

    t = sub.add_parser("train", help="train stage 1 or stage 2")
    common(t)
    t.add_argument("--stage", type=int, choices=(1, 2), required=True)
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int)
    t.add_argument("--resume", action="store_true")
    t.set_defaults(fn=cmd_train)

    c = sub.add_parser("convert", help="convert one utterance")
    c.add_argument("--mode", choices=pipeline.MODES, required=True)
    c.add_argument("--source", required=True)
    c.add_argument("--reference", required=True)
    c.add_argument("--ckpt", required=True)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)
    c.add_argument("--drop", choices=("content", "prosody"))
    c.set_defaults(fn=cmd_convert)

    e = sub.add_parser("eval", help="evaluate conversion pairs")
    e.add_argument("--pairs", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--corpus", help="manifest used to fit the contour-shape classifier")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="conversion with one condition nulled; writes mel CSV + PGM")
    a.add_argument("--source", required=True)
    a.add_argument("--reference")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--drop", choices=("content", "prosody"))
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", required=True)
    a.set_defaults(fn=cmd_ablate)

    gc = sub.add_parser("grad-check", help="finite-difference check of every network block")
    gc.add_argument("--tol", type=float, default=1e-3)
    gc.set_defaults(fn=cmd_grad_check)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    if not getattr(args, "fn", None):
        parser.print_help(sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args, argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DisclError, OSError, ValueError, ArithmeticError) as exc:
        print(f"error [{args.command}]: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
