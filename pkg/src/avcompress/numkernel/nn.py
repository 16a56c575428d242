"""Parameter containers and the standard transformer sublayers."""

from __future__ import annotations

import hashlib
import math
from typing import Iterator

import numpy as np

from . import ops
from .tensor import Parameter, Tensor


def uniform_fan_in(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def small_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


class Module:
    """Walks attributes to find parameters; submodules may sit in lists."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in self.__dict__.items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def freeze(self) -> "Module":
        for p in self.parameters():
            p.set_trainable(False)
        return self

    def unfreeze(self) -> "Module":
        for p in self.parameters():
            p.set_trainable(True)
        return self

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = np.zeros_like(p.data)
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in own.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {value.shape} != parameter shape {p.shape}")
            p.data = value.astype(p.data.dtype).copy()
            p.grad = np.zeros_like(p.data)

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(uniform_fan_in(rng, d_in, (d_in, d_out)))
        self.bias = Parameter(uniform_fan_in(rng, d_in, (d_out,))) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = x @ self.weight
        if self.bias is not None:
            out = out + self.bias
        return out

    def set_identity(self) -> None:
        d_in, d_out = self.weight.shape
        self.weight.data = np.eye(d_in, d_out, dtype=self.weight.dtype)
        if self.bias is not None:
            self.bias.data = np.zeros_like(self.bias.data)


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gain = Parameter(np.ones(d))
        self.bias = Parameter(np.zeros(d))

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gain, self.bias)


class MultiHeadAttention(Module):
    """Scaled dot-product attention with W_Q, W_K, W_V and output W_O."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        if d % heads:
            raise ValueError(f"model width {d} is not divisible by {heads} heads")
        self.heads = heads
        self.w_q = Linear(d, d, rng)
        self.w_k = Linear(d, d, rng)
        self.w_v = Linear(d, d, rng)
        self.w_o = Linear(d, d, rng)

    def forward(self, x_q: Tensor, x_kv: Tensor | None = None, causal: bool = False, key_mask=None) -> Tensor:
        if x_kv is None:
            x_kv = x_q
        q = self.w_q(x_q)
        k = self.w_k(x_kv)
        v = self.w_v(x_kv)
        out = ops.scaled_dot_product_attention(q, k, v, self.heads, causal=causal, key_mask=key_mask)
        return self.w_o(out)


def multi_head_attention(q, k, v, heads: int, causal_mask: bool = False, *, params: MultiHeadAttention, key_mask=None):
    """Functional form: project ``q`` with W_Q and ``k``/``v`` with W_K/W_V, attend, apply W_O."""
    qp = params.w_q(q)
    kp = params.w_k(k)
    vp = params.w_v(v)
    out = ops.scaled_dot_product_attention(qp, kp, vp, heads, causal=causal_mask, key_mask=key_mask)
    return params.w_o(out)


class FeedForward(Module):
    def __init__(self, d: int, d_ff: int, rng: np.random.Generator):
        self.up = Linear(d, d_ff, rng)
        self.down = Linear(d_ff, d, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.down(ops.gelu(self.up(x)))


class EncoderLayer(Module):
    """Pre-norm self-attention + feed-forward block (causal optional)."""

    def __init__(self, d: int, heads: int, d_ff: int, rng: np.random.Generator):
        self.norm_attn = LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads, rng)
        self.norm_ff = LayerNorm(d)
        self.ff = FeedForward(d, d_ff, rng)

    def forward(self, x: Tensor, causal: bool = False, key_mask=None) -> Tensor:
        h = self.norm_attn(x)
        x = x + self.attn(h, h, causal=causal, key_mask=key_mask)
        return x + self.ff(self.norm_ff(x))


def sinusoidal_positions(length: int, d: int, dtype=np.float64) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(0, d, 2)[None, :]
    angle = pos / np.power(10000.0, i / d)
    pe = np.zeros((length, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d // 2])
    return pe.astype(dtype)
