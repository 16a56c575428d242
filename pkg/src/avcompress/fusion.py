"""Early audio-visual fusion of time-aligned feature streams.

All strategies consume the length-adapted audio ``a`` and the visual stream
``v`` at the video frame rate and emit one fused frame per video frame.
"""

from __future__ import annotations

import numpy as np

from .features import FeatureSequence
from .numkernel import DimensionError, Module, MultiHeadAttention, Tensor, concat, no_grad

VARIANTS = ("concat", "add", "mmattn")


def _check_aligned(a_shape, v_shape) -> None:
    if a_shape != v_shape:
        raise DimensionError(f"audio {a_shape} and video {v_shape} streams are not aligned")


class Fusion(Module):
    variant = ""

    def output_dim(self, d: int) -> int:
        return d

    def forward(self, a: Tensor, v: Tensor, key_mask=None) -> Tensor:
        raise NotImplementedError


class ConcatFusion(Fusion):
    """``[a_t ; v_t]`` per frame, audio first."""

    variant = "concat"

    def output_dim(self, d: int) -> int:
        return 2 * d

    def forward(self, a, v, key_mask=None):
        _check_aligned(a.shape, v.shape)
        return concat([a, v], axis=-1)


class AddFusion(Fusion):
    variant = "add"

    def forward(self, a, v, key_mask=None):
        _check_aligned(a.shape, v.shape)
        return a + v


class AttentionFusion(Fusion):
    """Cross attention: video frames query the audio frames.

    No positional encoding is added here, so the output does not depend on
    the order of the audio frames.
    """

    variant = "mmattn"

    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        self.attn = MultiHeadAttention(d, heads, rng)

    def forward(self, a, v, key_mask=None):
        _check_aligned(a.shape, v.shape)
        return self.attn(v, a, key_mask=key_mask)


def make_fusion(variant: str, d: int, heads: int = 8, rng: np.random.Generator | None = None) -> Fusion:
    if variant == "concat":
        return ConcatFusion()
    if variant == "add":
        return AddFusion()
    if variant == "mmattn":
        if d % heads:
            raise ValueError(f"feature dim {d} is not divisible by {heads} heads")
        return AttentionFusion(d, heads, rng if rng is not None else np.random.default_rng(0))
    raise ValueError(f"unknown fusion variant {variant!r}; expected one of {VARIANTS}")


def _fuse_sequences(fusion: Fusion, a: FeatureSequence, v: FeatureSequence) -> FeatureSequence:
    if a.frame_rate_hz != v.frame_rate_hz:
        raise DimensionError(
            f"streams run at {a.frame_rate_hz} Hz and {v.frame_rate_hz} Hz; length-adapt audio first"
        )
    with no_grad():
        out = fusion(Tensor(a.frames.astype(np.float64)), Tensor(v.frames.astype(np.float64)))
    return FeatureSequence("fused", v.frame_rate_hz, out.data)


def fuse_concat(a: FeatureSequence, v: FeatureSequence) -> FeatureSequence:
    return _fuse_sequences(ConcatFusion(), a, v)


def fuse_add(a: FeatureSequence, v: FeatureSequence) -> FeatureSequence:
    return _fuse_sequences(AddFusion(), a, v)


def fuse_mmattn(a: FeatureSequence, v: FeatureSequence, params: AttentionFusion) -> FeatureSequence:
    return _fuse_sequences(params, a, v)
