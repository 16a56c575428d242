"""Run configuration: nested dataclasses persisted as YAML.

A config file may set any subset of keys; ``--set section.key=value`` flags
override it and ``MMS_SEED`` overrides ``seed``. The fully resolved config is
what every subcommand writes next to its outputs.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .avqformer import QFormerConfig
from .decoder import DecoderConfig
from .features import ConfigurationError, SynthesisConfig
from .numkernel import LrSchedule
from .pipeline import ModelConfig, TrainConfig
from .srp import SrpConfig

SEED_ENV = "MMS_SEED"


@dataclass
class PathsSection:
    corpus: str = ""
    srp: str = ""
    checkpoint: str = ""
    runs: str = "runs"


@dataclass
class FeaturesSection:
    n_utts: int = 2500
    vocab_size: int = 32
    rate_lo: float = 1.5
    rate_hi: float = 4.5
    words_lo: int = 3
    words_hi: int = 8
    audio_hz: int = 50
    video_hz: int = 25
    feature_dim: int = 64
    audio_noise_sigma: float = 0.2
    video_noise_sigma: float = 0.5


@dataclass
class FusionSection:
    variant: str = "concat"
    heads: int = 8


@dataclass
class QFormerSection:
    layers: int = 2
    dim: int = 256
    heads: int = 4
    ffn: int = 1024


@dataclass
class AllocSection:
    f_q: float = 3.0
    use_rate: bool = False
    r_lo: float = 0.5
    r_hi: float = 2.0
    min_queries: int = 1
    max_duration_s: float = 8.0


@dataclass
class SrpSection:
    modality: str = "audio"
    layers: int = 2
    dim: int = 256
    heads: int = 4
    ffn: int = 1024
    frame_deltas: bool = True
    positions: bool = False
    steps: int = 1500
    batch_size: int = 16
    peak_lr: float = 1e-3
    warmup_steps: int = 100


@dataclass
class DecoderSection:
    layers: int = 4
    dim: int = 256
    heads: int = 4
    ffn: int = 1024
    max_len: int = 256


@dataclass
class TrainSection:
    steps: int = 5000
    batch_size: int = 16
    peak_lr: float = 1e-4
    warmup_steps: int = 500
    total_steps: int | None = None  # defaults to ``steps``
    min_lr: float = 1e-5
    final_scale: float = 0.05
    augment_prob: float = 0.75
    snr_lo: float = -5.0
    snr_hi: float = 20.0
    jitter_sigma: float = 0.0
    audio_only: bool = False
    log_every: int = 1


@dataclass
class EvalSection:
    split: str = "test"
    beam: int = 5
    temperature: float = 0.3
    max_len: int = 16
    snr_db: list = field(default_factory=lambda: ["inf"])
    audio_only: bool = False
    batch_size: int = 32


@dataclass
class SweepSection:
    f_q: list = field(default_factory=lambda: [1, 2, 3, 4, 5])
    workers: int = 1


@dataclass
class CostingSection:
    baseline_tokens_per_s: float = 25.0
    baseline_fed_tokens_per_s: float | None = 50.0
    instruction_tokens: int = 16
    transcript_tokens_per_s: float = 4.0
    beam: int = 1
    audio_window_s: float | None = 30.0
    target_baseline_tflops: float = 2.24


@dataclass
class RunConfig:
    seed: int = 0
    paths: PathsSection = field(default_factory=PathsSection)
    features: FeaturesSection = field(default_factory=FeaturesSection)
    fusion: FusionSection = field(default_factory=FusionSection)
    qformer: QFormerSection = field(default_factory=QFormerSection)
    alloc: AllocSection = field(default_factory=AllocSection)
    srp: SrpSection = field(default_factory=SrpSection)
    decoder: DecoderSection = field(default_factory=DecoderSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    costing: CostingSection = field(default_factory=CostingSection)

    # -- conversion to module configs --

    def synthesis(self) -> SynthesisConfig:
        f = self.features
        return SynthesisConfig(
            vocab_size=f.vocab_size,
            rate_range_words_per_s=(f.rate_lo, f.rate_hi),
            words_range=(f.words_lo, f.words_hi),
            audio_hz=f.audio_hz,
            video_hz=f.video_hz,
            feature_dim=f.feature_dim,
            audio_noise_sigma=f.audio_noise_sigma,
            video_noise_sigma=f.video_noise_sigma,
            seed=self.seed,
        )

    def srp_config(self) -> SrpConfig:
        s = self.srp
        return SrpConfig(s.layers, s.dim, s.heads, s.ffn, s.modality, float(self.features.video_hz), s.frame_deltas, s.positions)

    def srp_schedule(self) -> LrSchedule:
        s = self.srp
        return LrSchedule(s.peak_lr, s.warmup_steps, s.steps, s.peak_lr * 0.05, 0.05)

    def model_config(self) -> ModelConfig:
        q, d, a = self.qformer, self.decoder, self.alloc
        return ModelConfig(
            feature_dim=self.features.feature_dim,
            video_hz=float(self.features.video_hz),
            fusion=self.fusion.variant,
            fusion_heads=self.fusion.heads,
            qformer=QFormerConfig(q.layers, q.dim, q.heads, q.ffn, d.dim),
            decoder=DecoderConfig(d.layers, d.dim, d.heads, d.ffn, d.max_len),
            f_q=a.f_q,
            use_rate=a.use_rate,
            r_lo=a.r_lo,
            r_hi=a.r_hi,
            min_queries=a.min_queries,
            max_duration_s=a.max_duration_s,
        )

    def train_config(self) -> TrainConfig:
        t = self.train
        total = t.steps if t.total_steps is None else t.total_steps
        return TrainConfig(
            steps=t.steps,
            batch_size=t.batch_size,
            schedule=LrSchedule(t.peak_lr, t.warmup_steps, total, t.min_lr, t.final_scale),
            seed=self.seed,
            augment_prob=t.augment_prob,
            augment_snr_range=(t.snr_lo, t.snr_hi),
            audio_only=t.audio_only,
            jitter_sigma=t.jitter_sigma,
            log_every=t.log_every,
        )

    def snr_list(self) -> list[float]:
        return [parse_snr(x) for x in self.eval.snr_db]

    # -- serialisation --

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=False)

    def digest(self, *extra: str) -> str:
        h = hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode())
        for e in extra:
            h.update(e.encode())
        return h.hexdigest()


def parse_snr(value) -> float:
    """Numbers, or ``inf`` / ``clean`` for the uncorrupted condition."""
    if isinstance(value, str) and value.strip().lower() in ("inf", "+inf", "clean"):
        return math.inf
    try:
        return float(value)
    except (TypeError, ValueError):
        raise ConfigurationError(f"bad SNR value {value!r}") from None


def _merge(obj, data: dict, where: str) -> None:
    if not isinstance(data, dict):
        raise ConfigurationError(f"{where or 'config'} must be a mapping")
    names = {f.name: f for f in dataclasses.fields(obj)}
    for key, value in data.items():
        if key not in names:
            raise ConfigurationError(f"unknown config key {where + key!r}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            _merge(current, value, f"{where}{key}.")
        else:
            setattr(obj, key, _coerce(current, value, where + key))


def _coerce(current, value, key: str):
    if value is None or current is None:
        return value
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigurationError(f"{key} expects true/false, got {value!r}")
        return value
    if isinstance(current, int) and not isinstance(value, bool):
        if isinstance(value, float) and value.is_integer():
            return int(value)
        if isinstance(value, int):
            return value
    if isinstance(current, float) and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if isinstance(current, str) and isinstance(value, str):
        return value
    if isinstance(current, list):
        return list(value) if isinstance(value, (list, tuple)) else [value]
    raise ConfigurationError(f"{key} expects {type(current).__name__}, got {value!r}")


def from_dict(data: dict | None) -> RunConfig:
    cfg = RunConfig()
    if data:
        _merge(cfg, data, "")
    return cfg


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``section.key=value`` strings; values are parsed as YAML scalars."""
    cfg = copy.deepcopy(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        value: Any = yaml.safe_load(raw)
        nested: Any = value
        for part in reversed(key.strip().split(".")):
            nested = {part: nested}
        _merge(cfg, nested, "")
    return cfg


def load_config(path=None, overrides: list[str] | None = None, env: dict | None = None) -> RunConfig:
    data = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigurationError(f"config file {p} does not exist")
        data = yaml.safe_load(p.read_text()) or {}
    cfg = apply_overrides(from_dict(data), overrides or [])
    env = os.environ if env is None else env
    if env.get(SEED_ENV, "") != "":
        try:
            cfg.seed = int(env[SEED_ENV])
        except ValueError:
            raise ConfigurationError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
    return cfg


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(cfg.to_yaml())
