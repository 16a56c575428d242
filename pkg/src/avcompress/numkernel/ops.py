"""Differentiable primitives built on :class:`Tensor`."""

from __future__ import annotations

import math

import numpy as np

from .tensor import DimensionError, Tensor, _wrap, matmul

MASK_VALUE = -1e9
_GELU_C = math.sqrt(2.0 / math.pi)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return Tensor._make(np.log(x.data), (x,), lambda g: (g / x.data,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._make(x.data * mask, (x,), lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * xd**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * d_inner),)

    return Tensor._make(out, (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor._make(s, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    d = x.shape[-1]
    if gain.shape[-1] != d or bias.shape[-1] != d:
        raise DimensionError(f"layer_norm affine params {gain.shape}/{bias.shape} do not match {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        dxhat = g * gain.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor._make(out, (x, gain, bias), backward)


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``logits``.

    ``mask`` (same shape as ``targets``) weights positions; the mean is taken
    over the mask total.
    """
    targets = np.asarray(targets, dtype=np.int64)
    V = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise DimensionError(f"targets {targets.shape} do not match logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise IndexError(f"target id out of range [0, {V})")
    w = np.ones(targets.shape, dtype=logits.dtype) if mask is None else np.asarray(mask, dtype=logits.dtype)
    denom = w.sum()
    if denom <= 0:
        raise ValueError("cross_entropy mask selects no positions")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = -(picked * w).sum() / denom

    def backward(g):
        grad = np.exp(logp)
        np.put_along_axis(
            grad, targets[..., None], np.take_along_axis(grad, targets[..., None], axis=-1) - 1.0, axis=-1
        )
        return (grad * (w / denom)[..., None] * g,)

    return Tensor._make(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def mse_loss(pred: Tensor, target) -> Tensor:
    pred = _wrap(pred)
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise DimensionError(f"mse_loss shapes differ: {pred.shape} vs {target.shape}")
    diff = pred.data - target
    n = diff.size

    def backward(g):
        return (g * 2.0 * diff / n,)

    return Tensor._make(np.asarray((diff**2).sum() / n, dtype=pred.dtype), (pred,), backward)


def key_padding_bias(key_mask: np.ndarray, dtype=np.float64) -> np.ndarray:
    """Additive bias [B, 1, 1, Tk] from a boolean validity mask [B, Tk]."""
    key_mask = np.asarray(key_mask, dtype=bool)
    bias = np.where(key_mask, 0.0, MASK_VALUE).astype(dtype)
    return bias[:, None, None, :]


def causal_bias(tq: int, tk: int, dtype=np.float64) -> np.ndarray:
    """Additive bias [Tq, Tk]; query i sees keys up to i (aligned to the end)."""
    offset = tk - tq
    allowed = np.arange(tk)[None, :] <= (np.arange(tq)[:, None] + offset)
    return np.where(allowed, 0.0, MASK_VALUE).astype(dtype)


def scaled_dot_product_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    heads: int,
    causal: bool = False,
    key_mask: np.ndarray | None = None,
) -> Tensor:
    """Split the last axis into ``heads``, attend, and merge back.

    ``q`` is [..., Tq, d]; ``k`` and ``v`` are [..., Tk, d]. ``key_mask`` is a
    boolean [B, Tk] array marking valid keys (3-D inputs only).
    """
    d = q.shape[-1]
    if d % heads:
        raise ValueError(f"model width {d} is not divisible by {heads} heads")
    if k.shape[-1] != d or v.shape[-1] != d:
        raise DimensionError(f"attention widths differ: q {q.shape}, k {k.shape}, v {v.shape}")
    squeeze = q.ndim == 2
    if squeeze:
        q, k, v = q.reshape(1, *q.shape), k.reshape(1, *k.shape), v.reshape(1, *v.shape)
    dh = d // heads

    def split(x: Tensor) -> Tensor:
        B, T, _ = x.shape
        return x.reshape(B, T, heads, dh).transpose(0, 2, 1, 3)

    qh, kh, vh = split(q), split(k), split(v)
    scores = matmul(qh, kh.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh))
    tq, tk = q.shape[1], k.shape[1]
    if causal:
        scores = scores + causal_bias(tq, tk, scores.dtype)
    if key_mask is not None:
        scores = scores + key_padding_bias(key_mask, scores.dtype)
    weights = softmax(scores, axis=-1)
    out = matmul(weights, vh).transpose(0, 2, 1, 3).reshape(q.shape[0], tq, d)
    if squeeze:
        out = out.reshape(tq, d)
    return out
