"""Analytical token-throughput, FLOPs and memory accounting.

Conventions: 2 FLOPs per multiply-accumulate. Per layer and per token a
transformer spends ``4 d^2`` MACs on the Q/K/V/O projections (fewer with
grouped K/V heads), ``2 c d`` MACs on attention scores and values at context
length ``c``, and ``m d d_ff`` MACs in the feed-forward block (``m = 2`` for a
plain MLP, 3 for a gated one). Decoders add ``d V`` MACs for the output head
on every processed token. Prefill processes the prompt once; generation
extends it one token at a time with a growing context.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.optimize import brentq

from .avqformer import AllocationPolicy, allocation_counts
from .features import DataError

FLOPS_PER_MAC = 2


@dataclass(frozen=True)
class ArchSpec:
    name: str
    layers: int
    embed_dim: int
    ffn_dim: int
    heads: int
    vocab: int = 0
    kv_heads: int | None = None
    ffn_matrices: int = 2
    causal: bool = True
    cross_attention: bool = False
    tied_embeddings: bool = True
    attention: bool = True
    param_count: int | None = None

    def __post_init__(self):
        if self.param_count is not None:
            derived = self.derived_param_count()
            if abs(self.param_count - derived) > 0.01 * derived:
                raise ValueError(
                    f"{self.name}: supplied param_count {self.param_count:,} differs from the "
                    f"closed-form {derived:,} by more than 1%"
                )

    @property
    def kv_dim(self) -> int:
        kv = self.heads if self.kv_heads is None else self.kv_heads
        return self.embed_dim * kv // self.heads

    def projection_macs(self) -> int:
        if not self.attention:
            return 0
        d = self.embed_dim
        return 2 * d * d + 2 * d * self.kv_dim

    def ffn_macs(self) -> int:
        return self.ffn_matrices * self.embed_dim * self.ffn_dim

    def derived_param_count(self) -> int:
        """Weight matrices only (biases and norms are below the 1% resolution)."""
        d = self.embed_dim
        per_layer = self.projection_macs() + self.ffn_macs()
        if self.cross_attention:
            per_layer += self.projection_macs()
        emb = self.vocab * d * (1 if self.tied_embeddings else 2)
        return self.layers * per_layer + emb


def _layer_macs(arch: ArchSpec, contexts: np.ndarray) -> float:
    """MACs of one layer for tokens attending to ``contexts`` keys each."""
    n = contexts.size
    attn = 2 * arch.embed_dim * contexts.sum() if arch.attention else 0.0
    return float(n * (arch.projection_macs() + arch.ffn_macs()) + attn)


def flops_transformer(arch: ArchSpec, prefix_len: int, generated_len: int = 0, head: bool = True) -> float:
    """FLOPs for prefilling ``prefix_len`` tokens then generating ``generated_len``."""
    if prefix_len < 0 or generated_len < 0:
        raise ValueError("lengths must be non-negative")
    if arch.causal:
        prefix_ctx = np.arange(1, prefix_len + 1, dtype=np.float64)
    else:
        prefix_ctx = np.full(prefix_len, float(prefix_len))
    gen_ctx = prefix_len + np.arange(1, generated_len + 1, dtype=np.float64)
    ctx = np.concatenate([prefix_ctx, gen_ctx])
    macs = arch.layers * _layer_macs(arch, ctx)
    if head and arch.vocab:
        macs += ctx.size * arch.embed_dim * arch.vocab
    return FLOPS_PER_MAC * macs


def flops_transformer_split(arch: ArchSpec, prefix_len: int, generated_len: int) -> tuple[float, float]:
    """(prefill FLOPs, generation FLOPs)."""
    prefill = flops_transformer(arch, prefix_len, 0)
    return prefill, flops_transformer(arch, prefix_len, generated_len) - prefill


def flops_qformer(arch: ArchSpec, n_queries: int, n_frames: int, input_dim: int) -> float:
    """Self-attention over queries, cross-attention into the frames, FFN."""
    d = arch.embed_dim
    macs = n_frames * input_dim * d if input_dim != d else 0
    per_layer = (
        n_queries * (arch.projection_macs() + arch.ffn_macs())
        + 2 * d * n_queries * n_queries
        + n_queries * 2 * d * d  # cross Q and O
        + n_frames * 2 * d * arch.kv_dim  # cross K and V over the frames
        + 2 * d * n_queries * n_frames
    )
    return FLOPS_PER_MAC * (macs + arch.layers * per_layer)


# -- reference architectures ----------------------------------------------------

LLAMA_3_2_3B = ArchSpec("llama-3.2-3b", 28, 3072, 8192, 24, vocab=128256, kv_heads=8, ffn_matrices=3)
LLAMA_3_2_3B_PLAIN = ArchSpec("llama-3.2-3b-plain", 28, 3072, 8192, 24, vocab=128256)
WHISPER_MEDIUM_ENCODER = ArchSpec("whisper-medium-encoder", 24, 1024, 4096, 16, causal=False)
AV_HUBERT_LARGE = ArchSpec("av-hubert-large", 24, 1024, 4096, 16, causal=False)
QFORMER_BERT_LARGE_2L = ArchSpec("qformer-bert-large-2l", 2, 1024, 4096, 16, causal=False, cross_attention=True)


# -- pipeline costs ----------------------------------------------------------------


@dataclass
class PipelineConfig:
    """One row of a cost table.

    ``mode`` is ``"baseline"`` (both streams fed to the decoder at
    ``baseline_tokens_per_s``), ``"fusion"`` (early fusion halves that) or
    ``"qformer"`` (tokens from the allocation policy). Reported token rates
    and the decoder's actual input length can differ in the first two modes;
    see ``baseline_fed_tokens_per_s``. ``durations_s`` is the
    clip-duration sample; ``rates`` optional per-clip speech rates.
    """

    name: str
    mode: str
    durations_s: Sequence[float]
    policy: AllocationPolicy | None = None
    rates: Sequence[float] | None = None
    fusion: str = "concat"
    baseline_tokens_per_s: float = 25.0
    # Tokens the decoder actually reads in baseline mode: the length-adapted
    # audio stream plus the video stream, 25 Hz each. None means "as reported".
    baseline_fed_tokens_per_s: float | None = 50.0
    instruction_tokens: int = 16
    transcript_tokens_per_s: float = 4.0
    beam: int = 1
    video_hz: float = 25.0
    audio_hz: float = 50.0
    feature_dim: int = 1024
    audio_window_s: float | None = 30.0
    audio_encoder: ArchSpec | None = WHISPER_MEDIUM_ENCODER
    visual_encoder: ArchSpec | None = AV_HUBERT_LARGE
    qformer: ArchSpec | None = QFORMER_BERT_LARGE_2L
    decoder: ArchSpec = LLAMA_3_2_3B
    mm_tokens_per_s: float | None = None
    bytes_per_param: int = 2

    def __post_init__(self):
        if self.mode not in ("baseline", "fusion", "qformer"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if len(self.durations_s) == 0:
            raise DataError("empty corpus")
        if min(self.durations_s) <= 0:
            raise DataError("durations must be positive")
        if self.mode == "qformer" and self.policy is None and self.mm_tokens_per_s is None:
            raise ValueError("qformer mode needs an allocation policy")


@dataclass
class CostReport:
    name: str
    tokens_per_second: float
    prefill_flops: float
    total_flops: float
    param_memory_bytes: float
    activation_memory_bytes: float
    breakdown: dict[str, float] = field(default_factory=dict)


def token_counts(config: PipelineConfig) -> np.ndarray:
    """Multimodal tokens per clip handed to the decoder."""
    d = np.asarray(config.durations_s, dtype=np.float64)
    if config.mm_tokens_per_s is not None:
        return config.mm_tokens_per_s * d
    if config.mode == "baseline":
        return config.baseline_tokens_per_s * d
    if config.mode == "fusion":
        return config.baseline_tokens_per_s / 2 * d
    pol = config.policy
    frames = np.maximum(1, np.round(d * config.video_hz))
    if pol.use_rate:
        if config.rates is None:
            raise ValueError("rate-aware policy needs per-clip rates")
        r = pol.clamp_rate(np.asarray(config.rates, dtype=np.float64))
    else:
        r = 1.0
    return allocation_counts(pol.f_q, frames / config.video_hz, r, pol.min_queries).astype(np.float64)


def decoder_token_counts(config: PipelineConfig) -> np.ndarray:
    """Multimodal tokens per clip that the decoder processes."""
    fed = config.baseline_fed_tokens_per_s
    if config.mm_tokens_per_s is not None or config.mode == "qformer" or fed is None:
        return token_counts(config)
    d = np.asarray(config.durations_s, dtype=np.float64)
    return (fed if config.mode == "baseline" else fed / 2) * d


def token_throughput(policy: AllocationPolicy | None, durations_s, rates=None, mode: str = "qformer", baseline_tokens_per_s: float = 25.0, video_hz: float = 25.0) -> float:
    """Mean over clips of tokens / duration."""
    durations_s = list(durations_s)
    if not durations_s:
        raise DataError("empty corpus")
    cfg = PipelineConfig(
        "throughput", mode, durations_s, policy=policy, rates=rates,
        baseline_tokens_per_s=baseline_tokens_per_s, video_hz=video_hz,
    )
    return float(np.mean(token_counts(cfg) / np.asarray(durations_s)))


def _clip_cost(config: PipelineConfig, duration: float, n_tokens: float) -> dict[str, float]:
    out = {"audio_encoder": 0.0, "visual_encoder": 0.0, "compressor": 0.0, "decoder_prefill": 0.0, "decoder_generate": 0.0}
    v_frames = max(1, int(round(duration * config.video_hz)))
    if config.audio_encoder is not None:
        window = duration if config.audio_window_s is None else max(duration, config.audio_window_s)
        # ``audio_hz`` is the encoder's rate after its strided conv front end.
        a_frames = int(round(window * config.audio_hz))
        out["audio_encoder"] = flops_transformer(config.audio_encoder, a_frames, 0, head=False)
    if config.visual_encoder is not None:
        out["visual_encoder"] = flops_transformer(config.visual_encoder, v_frames, 0, head=False)
    if config.mode == "qformer" and config.qformer is not None:
        fused_dim = 2 * config.feature_dim if config.fusion == "concat" else config.feature_dim
        out["compressor"] = flops_qformer(config.qformer, int(round(n_tokens)), v_frames, fused_dim)
    prefix = config.instruction_tokens + int(round(n_tokens))
    generated = int(round(config.transcript_tokens_per_s * duration))
    prefill, gen = flops_transformer_split(config.decoder, prefix, generated)
    out["decoder_prefill"] = config.beam * prefill
    out["decoder_generate"] = config.beam * gen
    return out


def pipeline_cost(config: PipelineConfig) -> CostReport:
    """Mean per-clip costs over the duration sample."""
    durations = np.asarray(config.durations_s, dtype=np.float64)
    counts = token_counts(config)
    fed = decoder_token_counts(config)
    parts: dict[str, float] = {}
    for dur, n in zip(durations, fed):
        for k, v in _clip_cost(config, float(dur), float(n)).items():
            parts[k] = parts.get(k, 0.0) + v
    parts = {k: v / len(durations) for k, v in parts.items()}
    total = sum(parts.values())
    prefill = total - parts["decoder_generate"]
    params = config.decoder.derived_param_count()
    for spec in (config.audio_encoder, config.visual_encoder):
        if spec is not None:
            params += spec.derived_param_count()
    if config.mode == "qformer" and config.qformer is not None:
        params += config.qformer.derived_param_count()
    mean_prefix = config.instruction_tokens + fed.mean() + config.transcript_tokens_per_s * durations.mean()
    kv_bytes = 2 * config.decoder.layers * config.decoder.kv_dim * mean_prefix * config.bytes_per_param * config.beam
    return CostReport(
        name=config.name,
        tokens_per_second=float(np.mean(counts / durations)),
        prefill_flops=prefill,
        total_flops=total,
        param_memory_bytes=float(params * config.bytes_per_param),
        activation_memory_bytes=float(kv_bytes),
        breakdown=parts,
    )


_REDUCIBLE = ("tokens_per_second", "prefill_flops", "total_flops", "param_memory_bytes", "activation_memory_bytes")


def reduction_report(baseline: CostReport, ours: CostReport) -> dict[str, float]:
    """Percent reduction ``(1 - ours / baseline) * 100`` per field."""
    out = {}
    for f in _REDUCIBLE:
        b = getattr(baseline, f)
        if b <= 0:
            raise DataError(f"baseline {f} is {b}; cannot form a reduction")
        out[f] = (1.0 - getattr(ours, f) / b) * 100.0
    return out


def calibrate_duration(config: PipelineConfig, target_total_flops: float, bracket=(0.1, 60.0)) -> float:
    """Single clip duration at which ``config`` costs ``target_total_flops``.

    Transcript length follows the duration through ``transcript_tokens_per_s``.
    """
    def gap(d: float) -> float:
        return pipeline_cost(replace(config, durations_s=[d])).total_flops - target_total_flops

    lo, hi = bracket
    if gap(lo) > 0 or gap(hi) < 0:
        raise ValueError(f"target {target_total_flops:.3e} FLOPs is outside the reachable range on {bracket} s")
    return float(brentq(gap, lo, hi, xtol=1e-9))


# -- reference comparison -------------------------------------------------------------

# Token rates measured on the reference corpus for the rate-aware rows, which
# depend on its speech-rate distribution rather than on clip duration alone.
REFERENCE_BASELINE_TFLOPS = 2.24
REFERENCE_RATE_AWARE_TOKENS_PER_S = {1: 1.035, 2: 2.290, 3: 3.538}


def reference_rows(base: PipelineConfig | None = None, target_tflops: float = REFERENCE_BASELINE_TFLOPS) -> tuple[float, list[CostReport]]:
    """Calibrate on the baseline row, then cost every other row at that duration.

    Returns the calibrated duration and the reports, baseline first.
    """
    if base is None:
        base = PipelineConfig("Baseline", "baseline", [1.0])
    base = replace(base, name="Baseline", mode="baseline")
    d = calibrate_duration(base, target_tflops * 1e12)
    rows = [replace(base, durations_s=[d])]
    rows.append(replace(base, name="+ Early AV Fusion", mode="fusion", durations_s=[d]))
    for f in (1, 2, 3):
        rows.append(replace(base, name=f"+ AV Q-Former f_Q={f}", mode="qformer", durations_s=[d], policy=AllocationPolicy(f)))
    for f in (1, 2, 3):
        rows.append(
            replace(
                base, name=f"+ Speech Rate Predictor f_Q={f}", mode="qformer", durations_s=[d],
                policy=AllocationPolicy(f, use_rate=True), mm_tokens_per_s=REFERENCE_RATE_AWARE_TOKENS_PER_S[f],
            )
        )
    return d, [pipeline_cost(r) for r in rows]


def format_table(reports: list[CostReport], baseline: CostReport | None = None) -> tuple[str, str]:
    """(CSV text, aligned text) with config, tokens_per_s, prefill_flops, total_flops, reduction_vs_baseline."""
    baseline = baseline or reports[0]
    header = ["config", "tokens_per_s", "prefill_flops", "total_flops", "reduction_vs_baseline"]
    rows = []
    for r in reports:
        red = reduction_report(baseline, r)["total_flops"]
        rows.append([r.name, f"{r.tokens_per_second:.3f}", f"{r.prefill_flops:.4e}", f"{r.total_flops:.4e}", f"{red:.1f}"])
    csv_text = "\n".join(",".join(x) for x in [header] + rows) + "\n"
    widths = [max(len(str(row[i])) for row in [header] + rows) for i in range(len(header))]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(row, widths)).rstrip() for row in [header] + rows]
    return csv_text, "\n".join(lines) + "\n"
