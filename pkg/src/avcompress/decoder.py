"""Toy autoregressive decoder standing in for the language model.

The decoder reads ``[instruction ; multimodal tokens ; BOS ; target]`` and is
trained with teacher forcing on the target positions only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .numkernel import (
    EncoderLayer,
    LayerNorm,
    Linear,
    Module,
    Parameter,
    Tensor,
    concat,
    no_grad,
    sinusoidal_positions,
    small_normal,
    take_rows,
)
from .features import ConfigurationError, DataError
from .numkernel.tensor import DimensionError

INSTRUCTION_LENGTH = 4


class Vocabulary:
    """Symbols first, then BOS, EOS, PAD, then the instruction tokens."""

    def __init__(self, symbols: Sequence[str], instruction_length: int = INSTRUCTION_LENGTH):
        self.symbols = list(symbols)
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("duplicate symbols")
        n = len(self.symbols)
        self.bos, self.eos, self.pad = n, n + 1, n + 2
        self.instruction = list(range(n + 3, n + 3 + instruction_length))
        self.size = n + 3 + instruction_length
        self._index = {s: i for i, s in enumerate(self.symbols)}

    def encode(self, words: Sequence[str]) -> list[int]:
        return [self._index[w] for w in words]

    def decode(self, ids: Sequence[int]) -> list[str]:
        out = []
        for i in ids:
            if i == self.eos:
                break
            if i < len(self.symbols):
                out.append(self.symbols[i])
        return out


@dataclass
class DecoderConfig:
    layers: int = 4
    embed_dim: int = 256
    heads: int = 4
    ffn_dim: int = 1024
    max_len: int = 256


class ToyDecoder(Module):
    def __init__(self, vocab_size: int, cfg: DecoderConfig, rng: np.random.Generator):
        d = cfg.embed_dim
        self.embedding = Parameter(small_normal(rng, (vocab_size, d)))
        self.layers = [EncoderLayer(d, cfg.heads, cfg.ffn_dim, rng) for _ in range(cfg.layers)]
        self.final_norm = LayerNorm(d)
        self.head = Linear(d, vocab_size, rng)
        self.embed_dim = d
        self.max_len = cfg.max_len

    def embed(self, ids) -> Tensor:
        return take_rows(self.embedding, np.asarray(ids, dtype=np.int64))

    def forward(self, x: Tensor) -> Tensor:
        """Embedded sequence [..., L, d] -> logits [..., L, V] under a causal mask."""
        L = x.shape[-2]
        if L > self.max_len:
            raise DimensionError(f"sequence length {L} exceeds decoder max_len {self.max_len}")
        h = x + sinusoidal_positions(L, self.embed_dim, x.dtype)
        for layer in self.layers:
            h = layer(h, causal=True)
        return self.head(self.final_norm(h))


@dataclass
class AssembledInput:
    embeddings: Tensor
    labels: np.ndarray
    loss_mask: np.ndarray


def assemble_input(decoder: ToyDecoder, vocab: "Vocabulary", mm: Tensor, target_ids) -> AssembledInput:
    """Single example ``[instr ; mm ; BOS ; target]``.

    Labels hold next-token targets; the loss mask covers the positions whose
    label is a target token (BOS through the second-to-last target).
    """
    if mm.ndim != 2:
        raise DimensionError(f"expected [n, d] multimodal tokens, got {mm.shape}")
    n, d = mm.shape
    batch = assemble_batch(decoder, vocab, mm.reshape(1, n, d), [n], [list(target_ids)])
    L = batch.embeddings.shape[1]
    return AssembledInput(batch.embeddings.reshape(L, d), batch.labels[0], batch.loss_mask[0])


def assemble_batch(
    decoder: ToyDecoder,
    vocab: Vocabulary,
    mm: Tensor,
    n_alloc: Sequence[int],
    targets: Sequence[Sequence[int]],
) -> AssembledInput:
    """Batch form. ``mm`` is [B, n_max, d] (rows past ``n_alloc[b]`` ignored).

    Each row is ``[instr ; mm[b, :n_b] ; BOS ; target_b]`` right-padded with
    PAD. Rows are built by gathering from a pool holding the embedding table
    followed by the flattened multimodal tokens.
    """
    B, n_max, d = mm.shape
    if d != decoder.embed_dim:
        raise DimensionError(f"multimodal tokens have width {d}, decoder expects {decoder.embed_dim}")
    V = decoder.embedding.shape[0]
    instr = vocab.instruction
    lengths = [len(instr) + n + 1 + len(t) for n, t in zip(n_alloc, targets)]
    L = max(lengths)
    index = np.full((B, L), vocab.pad, dtype=np.int64)
    labels = np.full((B, L), vocab.pad, dtype=np.int64)
    mask = np.zeros((B, L))
    for b, (n, tgt) in enumerate(zip(n_alloc, targets)):
        p = len(instr)
        index[b, :p] = instr
        index[b, p : p + n] = V + b * n_max + np.arange(n)
        p += n
        index[b, p] = vocab.bos
        index[b, p + 1 : p + 1 + len(tgt)] = tgt
        labels[b, p : p + len(tgt)] = tgt
        mask[b, p : p + len(tgt)] = 1.0
    pool = concat([decoder.embedding, mm.reshape(B * n_max, d)], axis=0)
    return AssembledInput(take_rows(pool, index), labels, mask)


# -- decoding ----------------------------------------------------------------


@dataclass
class Hypothesis:
    tokens: list[int] = field(default_factory=list)
    score: float = 0.0
    finished: bool = False


def beam_search_logits(
    next_logits: Callable[[list[list[int]]], np.ndarray],
    eos_id: int,
    beam: int = 5,
    temperature: float = 0.3,
    max_len: int = 16,
) -> Hypothesis:
    """Length-synchronous beam search over a next-token logit function.

    ``next_logits`` maps a list of equal-length prefixes to an [n, V] array.
    Scores are cumulative log-probabilities of ``logits / temperature``.
    Each step keeps the ``beam`` best extensions; those ending in EOS leave
    the beam. Equal scores prefer the lower token id, then the earlier beam.
    The greedy path is kept as a fallback, so a finished greedy hypothesis
    never outscores the result.
    """
    if beam < 1:
        raise ConfigurationError(f"beam must be >= 1, got {beam}")
    if not temperature > 0:
        raise ConfigurationError(f"temperature must be positive, got {temperature}")
    live = [Hypothesis()]
    finished: list[Hypothesis] = []
    for _ in range(max_len):
        logits = np.asarray(next_logits([h.tokens for h in live]), dtype=np.float64)
        scaled = logits / temperature
        shifted = scaled - scaled.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        total = np.array([h.score for h in live])[:, None] + logp
        n, V = total.shape
        hyp_idx, tok_idx = np.divmod(np.arange(n * V), V)
        order = np.lexsort((hyp_idx, tok_idx, -total.reshape(-1)))[:beam]
        new_live = []
        for flat in order:
            h, t = int(hyp_idx[flat]), int(tok_idx[flat])
            cand = Hypothesis(live[h].tokens + [t], float(total[h, t]), t == eos_id)
            (finished if cand.finished else new_live).append(cand)
        live = new_live
        if not live:
            break
        if finished and max(f.score for f in finished) >= max(h.score for h in live):
            break
    best = _best(finished) if finished else _best(live)
    if beam > 1:
        # Pruning can drop the greedy path; never return anything it beats.
        g = greedy_logits(next_logits, eos_id, max_len, temperature)
        if g.score > best.score and (g.finished or not best.finished):
            return g
    return best


def _best(hyps: list[Hypothesis]) -> Hypothesis:
    best = hyps[0]
    for h in hyps[1:]:
        if h.score > best.score:
            best = h
    return best


def greedy_logits(next_logits, eos_id: int, max_len: int = 16, temperature: float = 1.0) -> Hypothesis:
    """Argmax decoding (lowest id on ties).

    ``temperature`` only affects the reported score; the argmax path is the
    same for every positive temperature.
    """
    tokens: list[int] = []
    score = 0.0
    for _ in range(max_len):
        logits = np.asarray(next_logits([tokens]), dtype=np.float64)[0]
        scaled = logits / temperature
        shifted = scaled - scaled.max()
        logp = shifted - np.log(np.exp(shifted).sum())
        t = int(np.argmax(logits))
        tokens = tokens + [t]
        score += float(logp[t])
        if t == eos_id:
            return Hypothesis(tokens, score, True)
    return Hypothesis(tokens, score, False)


def decoder_step_fn(decoder: ToyDecoder, vocab: Vocabulary, mm: np.ndarray):
    """Next-token logits for prefixes following ``[instr ; mm ; BOS]``."""
    mm = np.asarray(mm, dtype=decoder.embedding.dtype)
    head = np.concatenate(
        [decoder.embedding.data[vocab.instruction], mm, decoder.embedding.data[[vocab.bos]]], axis=0
    )

    def next_logits(prefixes: list[list[int]]) -> np.ndarray:
        n = len(prefixes)
        tail = np.asarray(prefixes, dtype=np.int64).reshape(n, -1)
        x = np.concatenate(
            [np.broadcast_to(head, (n,) + head.shape), decoder.embedding.data[tail]], axis=1
        )
        with no_grad():
            logits = decoder(Tensor(x))
        return logits.data[:, -1, :]

    return next_logits


def beam_search(
    decoder: ToyDecoder,
    vocab: Vocabulary,
    mm: np.ndarray,
    beam: int = 5,
    temperature: float = 0.3,
    max_len: int = 16,
) -> Hypothesis:
    return beam_search_logits(decoder_step_fn(decoder, vocab, mm), vocab.eos, beam, temperature, max_len)


def greedy_decode(
    decoder: ToyDecoder, vocab: Vocabulary, mm: np.ndarray, max_len: int = 16, temperature: float = 1.0
) -> Hypothesis:
    return greedy_logits(decoder_step_fn(decoder, vocab, mm), vocab.eos, max_len, temperature)


# -- scoring -------------------------------------------------------------------


def edit_distance(reference: Sequence, hypothesis: Sequence) -> int:
    """Levenshtein distance with unit substitution/insertion/deletion costs."""
    prev = list(range(len(hypothesis) + 1))
    for i, r in enumerate(reference, 1):
        cur = [i] + [0] * len(hypothesis)
        for j, h in enumerate(hypothesis, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def wer(reference: Sequence, hypothesis: Sequence) -> float:
    if isinstance(reference, str):
        reference = reference.split()
    if isinstance(hypothesis, str):
        hypothesis = hypothesis.split()
    if len(reference) == 0:
        raise DataError("reference is empty")
    return edit_distance(reference, hypothesis) / len(reference)


def corpus_wer(pairs: Sequence[tuple[Sequence, Sequence]]) -> float:
    """Total edits over total reference words."""
    words = sum(len(r) for r, _ in pairs)
    if words == 0:
        raise DataError("no reference words")
    return sum(edit_distance(r, h) for r, h in pairs) / words
