"""Fusion, Q-Former, projector and decoder composed into one trainable model.

The feature generators stand in for frozen encoders; the speech-rate
predictor, when used, is frozen too. Everything else is trained jointly with
teacher-forced cross-entropy on the transcript.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .avqformer import AllocationPolicy, Projector, QFormer, QFormerConfig, QueryBank, allocate, required_bank_size
from .decoder import DecoderConfig, ToyDecoder, Vocabulary, assemble_batch, beam_search, corpus_wer
from .features import CLEAN, DataError, LoadedUtterance, NumericError, corrupt_audio, length_adapt
from .fusion import make_fusion
from .numkernel import LrSchedule, Module, OptimizerState, Tensor, adam_step, cross_entropy, lr_at, no_grad
from .srp import SpeechRatePredictor, pad_batch, predict_batch


@dataclass
class ModelConfig:
    feature_dim: int = 64
    video_hz: float = 25.0
    fusion: str = "concat"
    fusion_heads: int = 8
    qformer: QFormerConfig = field(default_factory=QFormerConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    f_q: float = 3.0
    use_rate: bool = False
    r_lo: float = 0.5
    r_hi: float = 2.0
    min_queries: int = 1
    max_duration_s: float = 8.0

    @property
    def policy(self) -> AllocationPolicy:
        return AllocationPolicy(self.f_q, self.use_rate, self.r_lo, self.r_hi, self.min_queries)


class AVSRModel(Module):
    def __init__(self, cfg: ModelConfig, vocab: Vocabulary, rng: np.random.Generator):
        if cfg.qformer.llm_dim != cfg.decoder.embed_dim:
            raise ValueError(f"projector width {cfg.qformer.llm_dim} must equal decoder width {cfg.decoder.embed_dim}")
        self.cfg = cfg
        self.vocab = vocab
        self.fusion = make_fusion(cfg.fusion, cfg.feature_dim, cfg.fusion_heads, rng)
        r_hi = cfg.r_hi if cfg.use_rate else 1.0
        n_max = max(cfg.min_queries, required_bank_size(cfg.f_q, cfg.max_duration_s, r_hi))
        self.bank = QueryBank(n_max, cfg.qformer.embed_dim, rng)
        self.qformer = QFormer(self.fusion.output_dim(cfg.feature_dim), cfg.qformer, rng)
        self.projector = Projector(cfg.qformer.embed_dim, cfg.qformer.llm_dim, rng)
        self.decoder = ToyDecoder(vocab.size, cfg.decoder, rng)

    @property
    def dtype(self):
        return self.decoder.embedding.dtype

    def multimodal_tokens(self, batch: "Batch") -> Tensor:
        """[B, n_max, llm_dim]; rows past each item's allocation are padding."""
        a, v = Tensor(batch.audio), Tensor(batch.video)
        fused = self.fusion(a, v, key_mask=batch.frame_mask)
        n_max = int(batch.n_alloc.max())
        queries = self.bank.queries[:n_max]
        q_mask = np.arange(n_max)[None, :] < batch.n_alloc[:, None]
        m = self.qformer(queries, fused, query_mask=q_mask, frame_mask=batch.frame_mask)
        return self.projector(m)

    def loss(self, batch: "Batch") -> Tensor:
        mm = self.multimodal_tokens(batch)
        assembled = assemble_batch(self.decoder, self.vocab, mm, batch.n_alloc.tolist(), batch.targets)
        logits = self.decoder(assembled.embeddings)
        return cross_entropy(logits, assembled.labels, assembled.loss_mask)


# -- batches --------------------------------------------------------------------------


@dataclass
class Batch:
    ids: list[str]
    audio: np.ndarray  # [B, T, D] at the video rate
    video: np.ndarray
    frame_mask: np.ndarray
    n_alloc: np.ndarray
    durations: np.ndarray
    rates: np.ndarray
    targets: list[list[int]]
    references: list[list[str]]


@dataclass
class BatchOptions:
    snr_db: float = CLEAN
    audio_only: bool = False
    # Training-time corruption: with this probability draw an SNR uniformly
    # from ``augment_snr_range``; zero disables it.
    augment_prob: float = 0.0
    augment_snr_range: tuple[float, float] = (-5.0, 20.0)
    # Fresh Gaussian jitter added to both streams at the video rate (training only).
    jitter_sigma: float = 0.0


class RateSource:
    """Per-utterance speech rates from a frozen predictor, cached by input."""

    def __init__(self, srp: SpeechRatePredictor, clamp: tuple[float, float]):
        self.srp = srp
        self.clamp = clamp
        self._cache: dict[tuple[str, float], float] = {}

    def rates(self, items: list[LoadedUtterance], audio: list, keys: list) -> np.ndarray:
        """``keys[i]`` is None for inputs that must not be cached (fresh noise)."""
        out = np.empty(len(items))
        todo = []
        for i, k in enumerate(keys):
            if k is not None and k in self._cache:
                out[i] = self._cache[k]
            else:
                todo.append(i)
        if todo:
            frames = []
            for i in todo:
                src = audio[i] if self.srp.cfg.input_modality == "audio" else items[i].video
                frames.append(self.srp.prepare(src))
            for i, r in zip(todo, predict_batch(self.srp, frames)):
                out[i] = r
                if keys[i] is not None:
                    self._cache[keys[i]] = float(r)
        return np.clip(out, *self.clamp)


def make_batch(
    model: AVSRModel,
    items: list[LoadedUtterance],
    rng: np.random.Generator,
    options: BatchOptions = BatchOptions(),
    rates: RateSource | None = None,
) -> Batch:
    cfg = model.cfg
    audio_seqs, keys = [], []
    for it in items:
        snr = options.snr_db
        if options.augment_prob > 0 and rng.random() < options.augment_prob:
            snr = float(rng.uniform(*options.augment_snr_range))
        seq = it.audio if math.isinf(snr) else corrupt_audio(it.audio, snr, rng)
        audio_seqs.append(seq)
        keys.append((it.utt.id, snr) if math.isinf(snr) else None)
    policy = cfg.policy
    if policy.use_rate:
        if rates is None:
            raise ValueError("rate-aware allocation needs a speech-rate predictor")
        r = rates.rates(items, audio_seqs, keys)
    else:
        r = np.ones(len(items))
    dtype = model.dtype
    a_frames, v_frames, n_alloc, durations = [], [], [], []
    for it, seq, r_i in zip(items, audio_seqs, r):
        a = length_adapt(seq, cfg.video_hz).frames
        v = it.video.frames
        T = min(a.shape[0], v.shape[0])
        a, v = a[:T], v[:T]
        if options.jitter_sigma > 0:
            a = a + rng.normal(0.0, options.jitter_sigma, a.shape)
            v = v + rng.normal(0.0, options.jitter_sigma, v.shape)
        if options.audio_only:
            v = np.zeros_like(v)
        a_frames.append(a)
        v_frames.append(v)
        alloc = allocate(policy, T, cfg.video_hz, float(r_i) if policy.use_rate else None, model.bank.n_max)
        n_alloc.append(alloc.n_alloc)
        durations.append(alloc.duration_s)
    audio, mask = pad_batch(a_frames, dtype)
    video, _ = pad_batch(v_frames, dtype)
    vocab = model.vocab
    return Batch(
        ids=[it.utt.id for it in items],
        audio=audio,
        video=video,
        frame_mask=mask,
        n_alloc=np.array(n_alloc, dtype=np.int64),
        durations=np.array(durations),
        rates=np.asarray(r, dtype=np.float64),
        targets=[vocab.encode(it.utt.transcript) + [vocab.eos] for it in items],
        references=[list(it.utt.transcript) for it in items],
    )


# -- training -----------------------------------------------------------------------------


@dataclass
class TrainConfig:
    steps: int = 5000
    batch_size: int = 16
    schedule: LrSchedule = field(default_factory=LrSchedule)
    seed: int = 0
    augment_prob: float = 0.0
    augment_snr_range: tuple[float, float] = (-5.0, 20.0)
    audio_only: bool = False
    jitter_sigma: float = 0.0
    log_every: int = 1


@dataclass
class StepLog:
    step: int
    loss: float
    lr: float
    mean_n_alloc: float


def train_step(model: AVSRModel, batch: Batch, state: OptimizerState, lr: float, params=None) -> float:
    """One Adam update on the masked cross-entropy; returns the loss."""
    params = model.parameters() if params is None else params
    model.zero_grad()
    loss = model.loss(batch)
    value = float(loss.data)
    if not math.isfinite(value):
        raise NumericError(f"loss became {value}")
    loss.backward()
    adam_step(params, state, lr)
    return value


def train_pipeline(
    model: AVSRModel,
    items: list[LoadedUtterance],
    cfg: TrainConfig,
    rates: RateSource | None = None,
    on_log: Callable[[StepLog], None] | None = None,
) -> list[StepLog]:
    if not items:
        raise DataError("empty training manifest")
    rng = np.random.default_rng([cfg.seed, 0x71])
    options = BatchOptions(
        audio_only=cfg.audio_only,
        augment_prob=cfg.augment_prob,
        augment_snr_range=cfg.augment_snr_range,
        jitter_sigma=cfg.jitter_sigma,
    )
    params = model.parameters()
    state = OptimizerState()
    logs = []
    for step in range(cfg.steps):
        idx = rng.choice(len(items), size=min(cfg.batch_size, len(items)), replace=False)
        batch = make_batch(model, [items[i] for i in idx], rng, options, rates)
        lr = lr_at(cfg.schedule, step)
        loss = train_step(model, batch, state, lr, params)
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            entry = StepLog(step, loss, lr, float(batch.n_alloc.mean()))
            logs.append(entry)
            if on_log is not None:
                on_log(entry)
    for p in params:
        if not np.all(np.isfinite(p.data)):
            raise NumericError("non-finite parameter after training")
    return logs


# -- evaluation --------------------------------------------------------------------------


@dataclass
class EvalResult:
    wer: float
    tokens_per_s: float
    lines: list[tuple[str, float, str]]


def evaluate(
    model: AVSRModel,
    items: list[LoadedUtterance],
    snr_db: float = CLEAN,
    audio_only: bool = False,
    beam: int = 5,
    temperature: float = 0.3,
    seed: int = 0,
    rates: RateSource | None = None,
    batch_size: int = 32,
    max_len: int = 16,
) -> EvalResult:
    """Beam-decode every utterance; corpus WER, mean tokens/s and per-utterance lines."""
    from .decoder import wer as utt_wer

    rng = np.random.default_rng([seed, 0xE7, 0 if math.isinf(snr_db) else int(round(snr_db * 100)) & 0xFFFF])
    options = BatchOptions(snr_db=snr_db, audio_only=audio_only)
    pairs, lines, tps = [], [], []
    for start in range(0, len(items), batch_size):
        batch = make_batch(model, items[start : start + batch_size], rng, options, rates)
        with no_grad():
            mm = model.multimodal_tokens(batch).data
        for b, uid in enumerate(batch.ids):
            n = int(batch.n_alloc[b])
            hyp = beam_search(model.decoder, model.vocab, mm[b, :n], beam, temperature, max_len)
            words = model.vocab.decode(hyp.tokens)
            ref = batch.references[b]
            pairs.append((ref, words))
            lines.append((uid, utt_wer(ref, words), " ".join(words)))
            tps.append(n / batch.durations[b])
    return EvalResult(corpus_wer(pairs), float(np.mean(tps)), lines)
