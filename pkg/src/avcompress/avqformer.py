"""Duration- and rate-proportional query allocation and the compressing Q-Former."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .features import FeatureSequence
from .numkernel import (
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    Parameter,
    Tensor,
    gelu,
    no_grad,
    sinusoidal_positions,
    small_normal,
)

# Products below are multiples of at least 1e-4 away from an integer unless
# they are integers; the slack only absorbs binary rounding of decimal inputs.
_FLOOR_SLACK = 1e-9


class CapacityError(ValueError):
    """More queries requested than the bank holds."""


@dataclass(frozen=True)
class AllocationPolicy:
    f_q: float
    use_rate: bool = False
    r_lo: float = 0.5
    r_hi: float = 2.0
    min_queries: int = 1

    def __post_init__(self):
        if not self.f_q > 0:
            raise ValueError(f"query rate must be positive, got {self.f_q}")
        if not self.r_lo <= 1.0 <= self.r_hi:
            raise ValueError(f"rate clamp must bracket 1.0, got [{self.r_lo}, {self.r_hi}]")
        if self.min_queries < 1:
            raise ValueError("min_queries must be at least 1")

    def clamp_rate(self, r_s):
        return np.clip(r_s, self.r_lo, self.r_hi)


@dataclass(frozen=True)
class QueryAllocation:
    n_alloc: int
    duration_s: float
    r_s_used: float


def allocation_counts(f_q, duration_s, r_used, min_queries: int = 1) -> np.ndarray:
    """Vectorised ``max(min_queries, floor(f_q * duration * r))``."""
    raw = np.asarray(f_q, dtype=np.float64) * np.asarray(duration_s, dtype=np.float64) * np.asarray(r_used, dtype=np.float64)
    return np.maximum(min_queries, np.floor(raw + _FLOOR_SLACK).astype(np.int64))


def allocate(policy: AllocationPolicy, T_v: int, F_v: float, r_s: float | None = None, n_max: int | None = None) -> QueryAllocation:
    """Number of queries for a clip of ``T_v`` frames at ``F_v`` Hz."""
    if T_v < 1 or not F_v > 0:
        raise ValueError(f"need T_v >= 1 and F_v > 0, got {T_v}, {F_v}")
    if policy.use_rate:
        if r_s is None:
            raise ValueError("rate-aware policy needs a speech rate")
        r_used = min(max(float(r_s), policy.r_lo), policy.r_hi)
    else:
        if r_s is not None:
            raise ValueError("rate-agnostic policy was given a speech rate")
        r_used = 1.0
    duration = T_v / F_v
    # Same float64 operations, in the same order, as allocation_counts.
    n = max(policy.min_queries, math.floor(policy.f_q * duration * r_used + _FLOOR_SLACK))
    if n_max is not None and n > n_max:
        raise CapacityError(f"allocation needs {n} queries but the bank holds {n_max}")
    return QueryAllocation(n, duration, r_used)


def required_bank_size(f_q_max: float, max_duration_s: float, r_hi: float) -> int:
    return int(math.ceil(f_q_max * max_duration_s * r_hi - _FLOOR_SLACK))


class QueryBank(Module):
    """Learnable queries; an allocation of n uses rows ``[0, n)``."""

    def __init__(self, n_max: int, d_q: int, rng: np.random.Generator, required: int | None = None):
        if required is not None and n_max < required:
            raise CapacityError(f"query bank of {n_max} rows is smaller than the required {required}")
        self.queries = Parameter(small_normal(rng, (n_max, d_q)))

    @property
    def n_max(self) -> int:
        return self.queries.shape[0]

    def forward(self, n: int) -> Tensor:
        return select_queries(self, n)


def select_queries(bank: QueryBank, alloc) -> Tensor:
    n = alloc.n_alloc if isinstance(alloc, QueryAllocation) else int(alloc)
    if n > bank.n_max:
        raise CapacityError(f"allocation needs {n} queries but the bank holds {bank.n_max}")
    if n < 1:
        raise ValueError("allocation must select at least one query")
    return bank.queries[:n]


@dataclass
class QFormerConfig:
    layers: int = 2
    embed_dim: int = 256
    heads: int = 4
    ffn_dim: int = 1024
    llm_dim: int = 256

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} is not divisible by {self.heads} heads")


class QFormerLayer(Module):
    """Pre-norm: query self-attention, cross-attention to the fused frames, FFN."""

    def __init__(self, d: int, heads: int, d_ff: int, rng: np.random.Generator):
        self.norm_self = LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, heads, rng)
        self.norm_cross = LayerNorm(d)
        self.cross_attn = MultiHeadAttention(d, heads, rng)
        self.norm_ff = LayerNorm(d)
        self.ff = FeedForward(d, d_ff, rng)

    def forward(self, x: Tensor, memory: Tensor, query_mask=None, frame_mask=None) -> Tensor:
        h = self.norm_self(x)
        x = x + self.self_attn(h, h, key_mask=query_mask)
        x = x + self.cross_attn(self.norm_cross(x), memory, key_mask=frame_mask)
        return x + self.ff(self.norm_ff(x))


class QFormer(Module):
    def __init__(self, fused_dim: int, cfg: QFormerConfig, rng: np.random.Generator):
        d = cfg.embed_dim
        self.input_proj = Linear(fused_dim, d, rng) if fused_dim != d else None
        self.memory_norm = LayerNorm(d)
        self.layers = [QFormerLayer(d, cfg.heads, cfg.ffn_dim, rng) for _ in range(cfg.layers)]
        self.final_norm = LayerNorm(d)
        self.embed_dim = d

    def forward(self, queries: Tensor, fused: Tensor, query_mask=None, frame_mask=None) -> Tensor:
        """``queries`` [n, d]; ``fused`` [T, D_f] or [B, T, D_f]. Output has n rows per item."""
        if queries.shape[0] < 1:
            raise ValueError("Q-Former needs at least one query")
        mem = self.input_proj(fused) if self.input_proj is not None else fused
        T = mem.shape[-2]
        mem = self.memory_norm(mem + sinusoidal_positions(T, self.embed_dim, mem.dtype))
        x = queries
        if mem.ndim == 3:
            B = mem.shape[0]
            x = queries.reshape(1, *queries.shape) + np.zeros((B, 1, 1), dtype=queries.dtype)
        for layer in self.layers:
            x = layer(x, mem, query_mask=query_mask, frame_mask=frame_mask)
        return self.final_norm(x)


class Projector(Module):
    """Two affine maps with GELU between them, into the decoder width."""

    def __init__(self, d_q: int, llm_dim: int, rng: np.random.Generator, activation: bool = True):
        self.first = Linear(d_q, llm_dim, rng)
        self.second = Linear(llm_dim, llm_dim, rng)
        self.activation = activation

    def forward(self, m: Tensor) -> Tensor:
        h = self.first(m)
        if self.activation:
            h = gelu(h)
        return self.second(h)


@dataclass
class MultimodalTokens:
    tokens: np.ndarray

    @property
    def n(self) -> int:
        return self.tokens.shape[0]


def qformer_forward(qformer: QFormer, queries: Tensor, fused: FeatureSequence | Tensor) -> Tensor:
    if isinstance(fused, FeatureSequence):
        fused = Tensor(fused.frames.astype(queries.dtype))
    return qformer(queries, fused)


def project_to_llm(projector: Projector, m: Tensor) -> MultimodalTokens:
    with no_grad():
        out = projector(m if isinstance(m, Tensor) else Tensor(m))
    return MultimodalTokens(out.data)
