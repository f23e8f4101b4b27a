"""Nested run configuration loaded from JSON. Unknown keys are rejected and the
fully resolved config (every default included) is written next to outputs."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .corpus import CorpusConfig
from .duration import DurationConfig
from .errors import ConfigError
from .fmt import FMTConfig
from .optim import AdamWConfig
from .pmt import PMTConfig
from .prosody_codec import CodecConfig


@dataclass
class TokenizerConfig:
    k: int = 16
    iters: int = 50
    max_frames: int = 60000


@dataclass
class Stage1Config:
    steps: int = 20000
    batch_frames: int = 2000
    content_dim: int = 64
    log_every: int = 50
    ckpt_every: int = 1000
    optim: AdamWConfig = field(default_factory=AdamWConfig)

    def validate(self):
        if self.steps <= 0:
            raise ConfigError("stage1.steps must be positive")


@dataclass
class Stage2Config:
    steps: int = 10000
    batch_tokens: int = 1200
    log_every: int = 50
    ckpt_every: int = 1000
    optim: AdamWConfig = field(default_factory=AdamWConfig)

    def validate(self):
        if self.steps <= 0:
            raise ConfigError("stage2.steps must be positive")


@dataclass
class SpeakerClassifierConfig:
    hidden: int = 64
    steps: int = 800
    batch: int = 16
    lr: float = 2e-3


@dataclass
class ConvertConfig:
    prompt_max_frames: int = 400
    griffin_lim_iters: int = 32


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    corpus_dir: str = "corpus"
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    duration: DurationConfig = field(default_factory=DurationConfig)
    fmt: FMTConfig = field(default_factory=FMTConfig)
    pmt: PMTConfig = field(default_factory=PMTConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    speaker_classifier: SpeakerClassifierConfig = field(default_factory=SpeakerClassifierConfig)
    convert: ConvertConfig = field(default_factory=ConvertConfig)


def from_dict(cls, data: dict[str, Any], path: str = ""):
    """Build dataclass ``cls`` from a (possibly partial) dict, recursing into nested configs."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be a JSON object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        where = f" in {path}" if path else ""
        raise ConfigError(f"unknown config key(s){where}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = fields[name]
        sub = f.default_factory() if f.default_factory is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(sub):
            kwargs[name] = from_dict(type(sub), value, f"{path}.{name}" if path else name)
        else:
            kwargs[name] = tuple(value) if isinstance(value, list) else value
    obj = cls(**kwargs)
    if hasattr(obj, "validate"):
        obj.validate()
    return obj


def to_dict(cfg) -> dict[str, Any]:
    return dataclasses.asdict(cfg)


def load(path: str | Path | None, overrides: dict[str, Any] | None = None) -> RunConfig:
    data = json.loads(Path(path).read_text()) if path else {}
    for key, value in (overrides or {}).items():
        if value is not None:
            data[key] = value
    return from_dict(RunConfig, data)


def save(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(to_dict(cfg), indent=2, sort_keys=True))
