"""Feature files, manifests, and the synthetic audio-visual corpus.

The corpus stands in for real encoder outputs. Each vocabulary symbol has a
fixed random embedding; an utterance renders its symbols as runs of
identical frames (one run per symbol, run length set by the speaking rate)
pushed through modality-specific random linear maps plus Gaussian noise.
Audio runs at twice the video frame rate.
"""

from __future__ import annotations

import json
import math
import os
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

MAGIC = b"AVSF"
VERSION = 1
MODALITIES = ("audio", "video", "fused")
_HEADER = struct.Struct("<4sHBBfII")
CLEAN = math.inf


class FormatError(ValueError):
    """Malformed AVSF file."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class DataError(ValueError):
    """Corpus content violates a data contract."""


class ConfigurationError(ValueError):
    """Incompatible configuration values."""


class NumericError(RuntimeError):
    """A loss or parameter became NaN or infinite."""


@dataclass
class FeatureSequence:
    modality: str
    frame_rate_hz: float
    frames: np.ndarray

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.frame_rate_hz <= 0:
            raise ValueError("frame_rate_hz must be positive")
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1 or self.frames.shape[1] < 1:
            raise ValueError(f"frames must be a non-empty T x D matrix, got {self.frames.shape}")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    @property
    def duration_s(self) -> float:
        return self.num_frames / self.frame_rate_hz


# -- AVSF binary format ---------------------------------------------------


def encode_features(seq: FeatureSequence) -> bytes:
    T, D = seq.frames.shape
    header = _HEADER.pack(MAGIC, VERSION, MODALITIES.index(seq.modality), 0, seq.frame_rate_hz, T, D)
    return header + np.ascontiguousarray(seq.frames, dtype="<f4").tobytes()


def decode_features(buf: bytes) -> FeatureSequence:
    if len(buf) < _HEADER.size:
        raise FormatError(f"truncated header: {len(buf)} of {_HEADER.size} bytes", len(buf))
    magic, version, modality, reserved, rate, T, D = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if modality >= len(MODALITIES):
        raise FormatError(f"unknown modality code {modality}", 6)
    if reserved != 0:
        raise FormatError("reserved byte must be zero", 7)
    if not (rate > 0 and math.isfinite(rate)):
        raise FormatError(f"invalid frame rate {rate}", 8)
    if T < 1 or D < 1:
        raise FormatError(f"empty frame matrix {T}x{D}", 12 if T < 1 else 16)
    need = _HEADER.size + 4 * T * D
    if len(buf) < need:
        raise FormatError(f"truncated payload: expected {need} bytes, got {len(buf)}", len(buf))
    if len(buf) > need:
        raise FormatError(f"{len(buf) - need} trailing bytes after payload", need)
    frames = np.frombuffer(buf, dtype="<f4", count=T * D, offset=_HEADER.size).reshape(T, D)
    return FeatureSequence(MODALITIES[modality], float(rate), frames.astype(np.float32))


def write_features(seq: FeatureSequence, path) -> None:
    Path(path).write_bytes(encode_features(seq))


def read_features(path) -> FeatureSequence:
    return decode_features(Path(path).read_bytes())


# -- manifest ---------------------------------------------------------------


@dataclass
class Utterance:
    id: str
    audio_path: str
    video_path: str
    transcript: list[str]
    duration_s: float
    word_count: int
    true_rate: float

    def __post_init__(self):
        if self.word_count != len(self.transcript):
            raise DataError(f"{self.id}: word_count {self.word_count} != transcript length {len(self.transcript)}")
        if self.duration_s <= 0:
            raise DataError(f"{self.id}: non-positive duration {self.duration_s}")

    def to_record(self) -> dict:
        rec = asdict(self)
        rec["transcript"] = " ".join(self.transcript)
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "Utterance":
        rec = dict(rec)
        rec["transcript"] = rec["transcript"].split()
        return cls(**rec)


def write_manifest(utts: Iterable[Utterance], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u in utts:
            fh.write(json.dumps(u.to_record(), sort_keys=True) + "\n")


def read_manifest(path) -> list[Utterance]:
    path = Path(path)
    utts = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                utts.append(Utterance.from_record(json.loads(line)))
            except (json.JSONDecodeError, TypeError, KeyError) as exc:
                raise DataError(f"{path}:{lineno}: bad manifest record ({exc})") from exc
    return utts


def resolve(manifest_path, rel: str) -> Path:
    return Path(manifest_path).parent / rel


# -- synthesis ----------------------------------------------------------------


@dataclass
class SynthesisConfig:
    vocab_size: int = 32
    rate_range_words_per_s: tuple[float, float] = (1.5, 4.5)
    words_range: tuple[int, int] = (3, 8)
    audio_hz: int = 50
    video_hz: int = 25
    feature_dim: int = 64
    audio_noise_sigma: float = 0.2
    video_noise_sigma: float = 0.5
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.rate_range_words_per_s
        self.rate_range_words_per_s = (float(lo), float(hi))
        self.words_range = (int(self.words_range[0]), int(self.words_range[1]))
        if not (lo > 0 and hi >= lo):
            raise ConfigurationError(f"rate range must satisfy 0 < lo <= hi, got {(lo, hi)}")
        if self.audio_hz % self.video_hz:
            raise ConfigurationError(f"audio_hz {self.audio_hz} is not a multiple of video_hz {self.video_hz}")
        if self.words_range[0] < 1 or self.words_range[1] < self.words_range[0]:
            raise ConfigurationError(f"bad words_range {self.words_range}")
        if self.vocab_size < 2:
            raise ConfigurationError("vocab_size must be at least 2 (no immediate repeats)")

    def symbols(self) -> list[str]:
        return [f"w{i:02d}" for i in range(self.vocab_size)]


@dataclass
class SyntheticWorld:
    """Fixed per-seed renderer shared by every split."""

    embeddings: np.ndarray
    audio_map: np.ndarray
    video_map: np.ndarray

    @classmethod
    def from_config(cls, cfg: SynthesisConfig) -> "SyntheticWorld":
        rng = np.random.default_rng([cfg.seed, 0x5EED])
        D = cfg.feature_dim
        emb = rng.standard_normal((cfg.vocab_size, D))
        audio_map = rng.standard_normal((D, D)) / math.sqrt(D)
        video_map = rng.standard_normal((D, D)) / math.sqrt(D)
        return cls(emb, audio_map, video_map)


def frames_per_symbol(rate: float, video_hz: float) -> int:
    """Video frames per symbol at ``rate`` symbols/s (at least one)."""
    return max(1, int(round(video_hz / rate)))


def _split_code(split: str) -> int:
    return zlib.crc32(split.encode("utf-8"))


def utterance_rng(cfg: SynthesisConfig, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, _split_code(split), index])


def sample_transcript(rng: np.random.Generator, cfg: SynthesisConfig) -> list[int]:
    """Symbol ids with no immediate repeats (identical adjacent runs would merge)."""
    n = int(rng.integers(cfg.words_range[0], cfg.words_range[1] + 1))
    ids = [int(rng.integers(cfg.vocab_size))]
    for _ in range(n - 1):
        nxt = int(rng.integers(cfg.vocab_size - 1))
        ids.append(nxt + (nxt >= ids[-1]))
    return ids


def render(
    world: SyntheticWorld, cfg: SynthesisConfig, symbol_ids: list[int], rate: float, rng: np.random.Generator
) -> tuple[FeatureSequence, FeatureSequence]:
    per_video = frames_per_symbol(rate, cfg.video_hz)
    per_audio = per_video * (cfg.audio_hz // cfg.video_hz)
    ids = np.asarray(symbol_ids)
    base = world.embeddings[ids]
    video = np.repeat(base @ world.video_map, per_video, axis=0)
    audio = np.repeat(base @ world.audio_map, per_audio, axis=0)
    video = video + cfg.video_noise_sigma * rng.standard_normal(video.shape)
    audio = audio + cfg.audio_noise_sigma * rng.standard_normal(audio.shape)
    return (
        FeatureSequence("audio", float(cfg.audio_hz), audio.astype(np.float32)),
        FeatureSequence("video", float(cfg.video_hz), video.astype(np.float32)),
    )


def synthesize_utterance(cfg: SynthesisConfig, world: SyntheticWorld, split: str, index: int):
    """Returns (Utterance without paths, audio, video)."""
    rng = utterance_rng(cfg, split, index)
    lo, hi = cfg.rate_range_words_per_s
    rate = float(rng.uniform(lo, hi))
    ids = sample_transcript(rng, cfg)
    audio, video = render(world, cfg, ids, rate, rng)
    symbols = cfg.symbols()
    duration = video.num_frames / cfg.video_hz
    utt = Utterance(
        id=f"{split}-{index:05d}",
        audio_path="",
        video_path="",
        transcript=[symbols[i] for i in ids],
        duration_s=duration,
        word_count=len(ids),
        true_rate=len(ids) / duration,
    )
    return utt, audio, video


def generate_corpus(cfg: SynthesisConfig, n_utts: int, split: str, out_dir) -> list[Utterance]:
    """Write ``n_utts`` utterances of ``split`` under ``out_dir`` plus ``<split>.jsonl``.

    The output is a pure function of (cfg, n_utts, split): each utterance
    draws from its own RNG stream keyed by (seed, split, index).
    """
    if n_utts < 1:
        raise DataError("n_utts must be at least 1")
    out_dir = Path(out_dir)
    (out_dir / split).mkdir(parents=True, exist_ok=True)
    world = SyntheticWorld.from_config(cfg)
    utts = []
    for i in range(n_utts):
        utt, audio, video = synthesize_utterance(cfg, world, split, i)
        utt.audio_path = f"{split}/{utt.id}.audio.avsf"
        utt.video_path = f"{split}/{utt.id}.video.avsf"
        write_features(audio, out_dir / utt.audio_path)
        write_features(video, out_dir / utt.video_path)
        utts.append(utt)
    write_manifest(utts, out_dir / f"{split}.jsonl")
    return utts


@dataclass
class LoadedUtterance:
    utt: Utterance
    audio: FeatureSequence
    video: FeatureSequence


def load_corpus(manifest_path) -> list[LoadedUtterance]:
    out = []
    for u in read_manifest(manifest_path):
        audio = read_features(resolve(manifest_path, u.audio_path))
        video = read_features(resolve(manifest_path, u.video_path))
        if abs(video.duration_s - u.duration_s) > 1.0 / video.frame_rate_hz + 1e-9:
            raise DataError(f"{u.id}: video duration {video.duration_s} disagrees with manifest {u.duration_s}")
        out.append(LoadedUtterance(u, audio, video))
    return out


# -- signal operations ------------------------------------------------------


def length_adapt(audio: FeatureSequence, target_hz: float) -> FeatureSequence:
    """Mean-pool non-overlapping windows of k frames, k = rate / target_hz.

    A trailing partial window is dropped.
    """
    ratio = audio.frame_rate_hz / target_hz
    k = int(round(ratio))
    if k < 1 or abs(ratio - k) > 1e-9:
        raise ConfigurationError(
            f"length adapter needs an integer rate ratio, got {audio.frame_rate_hz}/{target_hz}"
        )
    T = audio.num_frames // k
    if T < 1:
        raise DataError(f"{audio.num_frames} frames is shorter than one {k}-frame window")
    if k == 1:
        return FeatureSequence(audio.modality, float(target_hz), audio.frames.copy())
    pooled = audio.frames[: T * k].reshape(T, k, audio.dim).mean(axis=1)
    return FeatureSequence(audio.modality, float(target_hz), pooled.astype(audio.frames.dtype))


def corrupt_audio(seq: FeatureSequence, snr_db: float, rng: np.random.Generator) -> FeatureSequence:
    """Add white Gaussian noise at ``snr_db`` relative to the sequence's mean power.

    ``math.inf`` means clean and returns an unchanged copy.
    """
    if seq.modality != "audio":
        raise ConfigurationError(f"corrupt_audio expects audio features, got {seq.modality}")
    if math.isinf(snr_db) and snr_db > 0:
        return FeatureSequence(seq.modality, seq.frame_rate_hz, seq.frames.copy())
    x = seq.frames.astype(np.float64)
    signal_power = float(np.mean(x**2))
    noise_power = signal_power / 10.0 ** (snr_db / 10.0)
    noisy = x + math.sqrt(noise_power) * rng.standard_normal(x.shape)
    return FeatureSequence(seq.modality, seq.frame_rate_hz, noisy.astype(seq.frames.dtype))


def measured_snr_db(clean: np.ndarray, noisy: np.ndarray) -> float:
    clean = np.asarray(clean, dtype=np.float64)
    noise = np.asarray(noisy, dtype=np.float64) - clean
    return 10.0 * math.log10(np.mean(clean**2) / np.mean(noise**2))


# -- speech-rate statistics ---------------------------------------------------


@dataclass
class CorpusStats:
    mean_words_per_s: float
    n_utterances: int
    duration_histogram: tuple[list[int], list[float]] = field(default_factory=lambda: ([], []))

    def to_dict(self) -> dict:
        counts, edges = self.duration_histogram
        return {
            "mean_words_per_s": self.mean_words_per_s,
            "n_utterances": self.n_utterances,
            "duration_histogram": {"counts": list(counts), "edges": list(edges)},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusStats":
        h = d.get("duration_histogram", {})
        return cls(d["mean_words_per_s"], d["n_utterances"], (h.get("counts", []), h.get("edges", [])))


def speech_rate(u: Utterance) -> float:
    if u.duration_s <= 0:
        raise DataError(f"{u.id}: zero duration")
    return u.word_count / u.duration_s


def corpus_stats(train_manifest: list[Utterance], bins: int = 10) -> CorpusStats:
    """Reference statistics; pass the training split only."""
    if not train_manifest:
        raise DataError("empty manifest")
    rates = np.array([speech_rate(u) for u in train_manifest])
    counts, edges = np.histogram([u.duration_s for u in train_manifest], bins=bins)
    return CorpusStats(float(rates.mean()), len(train_manifest), (counts.tolist(), edges.tolist()))


def compute_rate_labels(manifest: list[Utterance], stats: CorpusStats) -> dict[str, float]:
    """Speech rate of each utterance divided by the training-split mean."""
    return {u.id: speech_rate(u) / stats.mean_words_per_s for u in manifest}


def sha256_of_tree(root, exclude: Iterable[str] = ()) -> str:
    """Digest over every file under ``root`` (relative path + bytes), sorted.

    Top-level file names in ``exclude`` are skipped.
    """
    import hashlib

    h = hashlib.sha256()
    root = Path(root)
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for name in sorted(filenames):
            p = Path(dirpath) / name
            if str(p.relative_to(root)) in exclude:
                continue
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()
