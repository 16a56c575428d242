"""Speech-rate predictor: transformer regressor of the normalised speaking rate.

It is trained with MSE on labels from :func:`features.compute_rate_labels`
before the main pipeline, then frozen.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .features import ConfigurationError, DataError, NumericError, FeatureSequence, LoadedUtterance, length_adapt
from .numkernel import (
    EncoderLayer,
    LayerNorm,
    Linear,
    LrSchedule,
    Module,
    OptimizerState,
    Tensor,
    adam_step,
    lr_at,
    mse_loss,
    no_grad,
    sinusoidal_positions,
)

_MODALITY = {"audio": "audio", "visual": "video"}


@dataclass
class SrpConfig:
    layers: int = 2
    embed_dim: int = 256
    heads: int = 4
    ffn_dim: int = 1024
    input_modality: str = "audio"
    input_hz: float = 25.0
    # Append first differences and their norm; run boundaries are what carry rate.
    frame_deltas: bool = True
    # Without positions the stack sees a multiset of frames, so repeating the
    # content leaves the pooled output unchanged.
    positions: bool = False

    def __post_init__(self):
        if self.input_modality not in _MODALITY:
            raise ConfigurationError(f"srp modality must be 'audio' or 'visual', got {self.input_modality!r}")


class SpeechRatePredictor(Module):
    """Input projection, pre-norm encoder stack, masked mean pool, scalar head."""

    def __init__(self, feature_dim: int, cfg: SrpConfig, rng: np.random.Generator):
        E = cfg.embed_dim
        self.input_proj = Linear(feature_dim * 2 + 1 if cfg.frame_deltas else feature_dim, E, rng)
        self.layers = [EncoderLayer(E, cfg.heads, cfg.ffn_dim, rng) for _ in range(cfg.layers)]
        self.final_norm = LayerNorm(E)
        self.head = Linear(E, 1, rng)
        # Start at the label mean so the untrained model predicts "average speed".
        self.head.bias.data[:] = 1.0
        self.cfg = cfg

    @property
    def frozen(self) -> bool:
        return not any(p.trainable for p in self.parameters())

    def forward(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        """``x`` [B, T, D] with validity ``mask`` [B, T] -> predictions [B]."""
        B, T, _ = x.shape
        if mask is None:
            mask = np.ones((B, T), dtype=bool)
        h = self.input_proj(x)
        if self.cfg.positions:
            h = h + sinusoidal_positions(T, self.cfg.embed_dim, x.dtype)
        for layer in self.layers:
            h = layer(h, key_mask=mask)
        h = self.final_norm(h)
        w = (mask / mask.sum(axis=1, keepdims=True)).astype(x.dtype)[:, :, None]
        pooled = (h * w).sum(axis=1)
        return self.head(pooled).reshape(B)

    def prepare(self, features: FeatureSequence) -> np.ndarray:
        """Frames at ``input_hz`` for the configured modality."""
        want = _MODALITY[self.cfg.input_modality]
        if features.modality != want:
            raise ConfigurationError(f"predictor expects {want} features, got {features.modality}")
        if features.frame_rate_hz != self.cfg.input_hz:
            features = length_adapt(features, self.cfg.input_hz)
        x = features.frames
        if self.cfg.frame_deltas:
            # Differencing from silence makes the first word an onset like the rest,
            # so onsets per frame is exactly words per frame.
            d = np.diff(x, axis=0, prepend=np.zeros_like(x[:1]))
            # Onset strength (flux): a jump's size survives the layer norms, its direction does not matter.
            x = np.concatenate([x, d, np.linalg.norm(d, axis=1, keepdims=True)], axis=1)
        return x


def pad_batch(seqs: list[np.ndarray], dtype) -> tuple[np.ndarray, np.ndarray]:
    T = max(s.shape[0] for s in seqs)
    D = seqs[0].shape[1]
    x = np.zeros((len(seqs), T, D), dtype=dtype)
    mask = np.zeros((len(seqs), T), dtype=bool)
    for i, s in enumerate(seqs):
        x[i, : s.shape[0]] = s
        mask[i, : s.shape[0]] = True
    return x, mask


def predict_batch(model: SpeechRatePredictor, frames: list[np.ndarray], batch_size: int = 32) -> np.ndarray:
    dtype = model.head.weight.dtype
    out = []
    with no_grad():
        for i in range(0, len(frames), batch_size):
            x, mask = pad_batch(frames[i : i + batch_size], dtype)
            out.append(model(Tensor(x), mask).data)
    return np.concatenate(out).astype(np.float64)


def srp_forward(model: SpeechRatePredictor, features: FeatureSequence) -> float:
    return float(predict_batch(model, [model.prepare(features)])[0])


def predict_rate(model: SpeechRatePredictor, features: FeatureSequence, clamp=(0.5, 2.0)) -> float:
    return float(np.clip(srp_forward(model, features), clamp[0], clamp[1]))


def clamp_rate(raw: float, clamp=(0.5, 2.0)) -> float:
    return float(np.clip(raw, clamp[0], clamp[1]))


def select_features(item: LoadedUtterance, cfg: SrpConfig) -> FeatureSequence:
    return item.audio if cfg.input_modality == "audio" else item.video


@dataclass
class SrpTrainResult:
    loss_curve: list[float] = field(default_factory=list)
    heldout_mse: float = float("nan")
    checksum: str = ""


def evaluate_srp(model: SpeechRatePredictor, items: list[LoadedUtterance], labels: dict[str, float]) -> float:
    frames = [model.prepare(select_features(it, model.cfg)) for it in items]
    pred = predict_batch(model, frames)
    target = np.array([labels[it.utt.id] for it in items])
    return float(np.mean((pred - target) ** 2))


def train_srp(
    model: SpeechRatePredictor,
    train_items: list[LoadedUtterance],
    labels: dict[str, float],
    schedule: LrSchedule,
    steps: int,
    batch_size: int = 16,
    seed: int = 0,
    heldout: list[LoadedUtterance] | None = None,
    heldout_labels: dict[str, float] | None = None,
    log_every: int = 1,
) -> SrpTrainResult:
    """Fit by MSE with Adam, then freeze. Returns the loss curve and held-out MSE."""
    if not train_items:
        raise DataError("empty training manifest")
    rng = np.random.default_rng([seed, 0x52])
    frames = [model.prepare(select_features(it, model.cfg)) for it in train_items]
    targets = np.array([labels[it.utt.id] for it in train_items])
    params = model.parameters()
    state = OptimizerState()
    dtype = model.head.weight.dtype
    result = SrpTrainResult()
    for step in range(steps):
        idx = rng.choice(len(frames), size=min(batch_size, len(frames)), replace=False)
        x, mask = pad_batch([frames[i] for i in idx], dtype)
        model.zero_grad()
        loss = mse_loss(model(Tensor(x), mask), targets[idx].astype(dtype))
        if not np.isfinite(loss.data):
            raise NumericError(f"speech-rate loss became {float(loss.data)} at step {step}")
        loss.backward()
        adam_step(params, state, lr_at(schedule, step))
        if step % log_every == 0 or step == steps - 1:
            result.loss_curve.append(float(loss.data))
    model.freeze()
    if heldout:
        result.heldout_mse = evaluate_srp(model, heldout, heldout_labels if heldout_labels is not None else labels)
    result.checksum = model.checksum()
    return result
