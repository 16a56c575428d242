"""Model checkpoints as an AVSF container plus a text sidecar of layer shapes.

All parameters are flattened in ``named_parameters`` order into one column of
float32 values (``modality="fused"``); the ``.shapes`` sidecar lists one
``name<TAB>dim0xdim1...`` line per parameter so the vector can be split back.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .features import FeatureSequence, FormatError, read_features, write_features
from .numkernel import Module


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".shapes")


def save_checkpoint(model: Module, path) -> None:
    path = Path(path)
    named = list(model.named_parameters())
    if not named:
        raise ValueError("model has no parameters")
    flat = np.concatenate([p.data.astype(np.float32).reshape(-1) for _, p in named])
    write_features(FeatureSequence("fused", 1.0, flat.reshape(-1, 1)), path)
    lines = [f"{name}\t{'x'.join(str(s) for s in p.shape) or 'scalar'}" for name, p in named]
    _sidecar(path).write_text("\n".join(lines) + "\n")


def read_shapes(path) -> list[tuple[str, tuple[int, ...]]]:
    out = []
    for line in _sidecar(Path(path)).read_text().splitlines():
        if not line.strip():
            continue
        name, shape = line.split("\t")
        out.append((name, () if shape == "scalar" else tuple(int(s) for s in shape.split("x"))))
    return out


def load_checkpoint(model: Module, path) -> None:
    """Fill ``model`` in place; names and shapes must match the sidecar exactly."""
    seq = read_features(path)
    if seq.modality != "fused" or seq.dim != 1:
        raise FormatError("checkpoint must be a single fused column", 0)
    shapes = read_shapes(path)
    named = list(model.named_parameters())
    if [n for n, _ in shapes] != [n for n, _ in named]:
        raise FormatError("checkpoint parameter names do not match the model", 0)
    flat = seq.frames[:, 0]
    total = sum(int(np.prod(s)) for _, s in shapes)
    if total != flat.size:
        raise FormatError(f"checkpoint holds {flat.size} values, sidecar lists {total}", 0)
    offset = 0
    for (name, shape), (_, p) in zip(shapes, named):
        if tuple(p.shape) != shape:
            raise FormatError(f"{name}: checkpoint shape {shape} vs model {p.shape}", 0)
        n = int(np.prod(shape))
        p.data[...] = flat[offset : offset + n].reshape(shape).astype(p.dtype)
        offset += n
