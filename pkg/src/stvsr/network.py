"""One-stage space-time super-resolution network.

feature extractor -> feature temporal interpolation -> (bidirectional)
deformable ConvLSTM -> 1x1 fusion -> HR frame reconstructor.

``n + 1`` LR frames of size ``H x W`` map to ``2n + 1`` frames of size
``4H x 4W``. Extraction and reconstruction are shared across time and are
evaluated on all time steps at once by stacking them along the batch axis.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Sequence

import numpy as np

from .dconvlstm import DConvLSTMParams, run_bidirectional, run_unidirectional
from .interp import InterpParams, interpolate_sequence
from .nn import Conv2d, Module, ResidualBlock
from .tensor import (
    ContractError,
    Tensor,
    cat_batch,
    leaky_relu,
    pixel_shuffle,
    reshape,
    split_batch,
)

CHARBONNIER_EPS = 1e-3

# ablation variants: (feature_interp, temporal, bidirectional)
ABLATIONS = {
    "a": ("naive", "none", False),
    "b": ("deformable", "none", False),
    "c": ("deformable", "convlstm", False),
    "d": ("deformable", "dconvlstm", False),
    "e": ("deformable", "dconvlstm", True),
}


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 64
    k1: int = 5
    k2: int = 40
    scale: int = 4
    feature_interp: str = "deformable"
    temporal: str = "dconvlstm"
    bidirectional: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.scale != 4:
            raise ContractError(f"only x4 upscaling is supported, got scale={self.scale}")
        if self.channels < 1 or self.k1 < 0 or self.k2 < 0:
            raise ContractError(f"invalid sizes: channels={self.channels}, k1={self.k1}, k2={self.k2}")
        if self.feature_interp not in ("naive", "deformable"):
            raise ContractError(f"feature_interp must be naive|deformable, got {self.feature_interp!r}")
        if self.temporal not in ("none", "convlstm", "dconvlstm"):
            raise ContractError(f"temporal must be none|convlstm|dconvlstm, got {self.temporal!r}")
        if self.temporal == "none" and self.bidirectional:
            object.__setattr__(self, "bidirectional", False)

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        """Small configuration for CPU runs: C=16, k1=2, k2=4."""
        base = dict(channels=16, k1=2, k2=4)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_ablation(cls, letter: str, **overrides) -> "ModelConfig":
        if letter not in ABLATIONS:
            raise ContractError(f"unknown ablation {letter!r}; expected one of {sorted(ABLATIONS)}")
        interp, temporal, bidir = ABLATIONS[letter]
        return cls(**{**overrides, "feature_interp": interp, "temporal": temporal, "bidirectional": bidir})

    def with_ablation(self, letter: str) -> "ModelConfig":
        interp, temporal, bidir = ABLATIONS[letter]
        return replace(self, feature_interp=interp, temporal=temporal, bidirectional=bidir)

    @property
    def ablation(self) -> str | None:
        key = (self.feature_interp, self.temporal, self.bidirectional)
        for letter, value in ABLATIONS.items():
            if value == key:
                return letter
        return None

    @property
    def fuses(self) -> bool:
        return self.temporal != "none" and self.bidirectional

    def as_dict(self) -> dict:
        return asdict(self)


class FeatureExtractor(Module):
    def __init__(self, channels: int, blocks: int, rng=None):
        self.conv_first = Conv2d(3, channels, 3, rng=rng)
        self.blocks = [ResidualBlock(channels, rng=rng) for _ in range(blocks)]

    def __call__(self, x: Tensor) -> Tensor:
        x = self.conv_first(x)
        for block in self.blocks:
            x = block(x)
        return x


class Reconstructor(Module):
    """Residual blocks, two (conv C->4C, pixel shuffle x2, leaky relu) stages, conv C->3."""

    def __init__(self, channels: int, blocks: int, rng=None):
        self.blocks = [ResidualBlock(channels, rng=rng) for _ in range(blocks)]
        self.up1 = Conv2d(channels, 4 * channels, 3, rng=rng)
        self.up2 = Conv2d(channels, 4 * channels, 3, rng=rng)
        self.conv_last = Conv2d(channels, 3, 3, rng=rng)

    def __call__(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        x = leaky_relu(pixel_shuffle(self.up1(x), 2), 0.1)
        x = leaky_relu(pixel_shuffle(self.up2(x), 2), 0.1)
        return self.conv_last(x)


class ZoomingModel(Module):
    def __init__(self, config: ModelConfig | None = None):
        config = ModelConfig() if config is None else config
        self.config = config
        # one independent stream per component, so toggling an ablation flag
        # leaves the initialisation of every other component unchanged
        streams = [np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(5)]
        c = config.channels
        self.extractor = FeatureExtractor(c, config.k1, rng=streams[0])
        self.interp = InterpParams(c, mode=config.feature_interp, rng=streams[1])
        if config.temporal != "none":
            self.lstm = DConvLSTMParams(c, aligned=config.temporal == "dconvlstm", rng=streams[2])
        if config.fuses:
            self.fusion = Conv2d(2 * c, c, 1, rng=streams[3])
        self.reconstructor = Reconstructor(c, config.k2, rng=streams[4])

    def __call__(self, lr_frames) -> list[Tensor]:
        return forward(lr_frames, self)


def _as_frames(frames) -> list[Tensor]:
    if isinstance(frames, Tensor):
        frames = list(frames.data)
    elif isinstance(frames, np.ndarray):
        frames = list(frames)
    return [f if isinstance(f, Tensor) else Tensor(f) for f in frames]


def _stack_time(frames: Sequence[Tensor]) -> tuple[Tensor, int]:
    """Stack per-step 3-D or 4-D maps along the batch axis."""
    lifted = [reshape(f, (1, *f.shape)) if f.ndim == 3 else f for f in frames]
    return cat_batch(lifted), len(frames)


def _unstack_time(x: Tensor, steps: int, squeeze: bool) -> list[Tensor]:
    parts = split_batch(x, steps)
    return [reshape(p, p.shape[1:]) for p in parts] if squeeze else parts


def extract_features(frames, model: ZoomingModel) -> list[Tensor]:
    frames = _as_frames(frames)
    if not frames:
        raise ContractError("extract_features: empty frame sequence")
    stacked, steps = _stack_time(frames)
    return _unstack_time(model.extractor(stacked), steps, frames[0].ndim == 3)


def reconstruct_frame(hidden: Tensor, model: ZoomingModel) -> Tensor:
    """Map a fused C x H x W state (or a batch of them) to a 3 x 4H x 4W frame."""
    return model.reconstructor(hidden)


def forward(lr_frames, model: ZoomingModel) -> list[Tensor]:
    """Run the full model on ``n + 1`` LR frames, returning ``2n + 1`` HR frames.

    Frames may be ``3 x H x W`` or batched ``N x 3 x H x W``; outputs follow suit.
    Outputs are unclamped.
    """
    frames = _as_frames(lr_frames)
    if len(frames) < 2:
        raise ContractError(f"forward needs at least 2 LR frames, got {len(frames)}")
    shape = frames[0].shape
    for f in frames:
        if f.shape != shape:
            raise ContractError(f"forward: frame size mismatch {shape} vs {f.shape}")
    if shape[-3] != 3:
        raise ContractError(f"forward: frames must have 3 channels, got {shape}")
    squeeze = len(shape) == 3
    if squeeze:
        frames = [reshape(f, (1, *shape)) for f in frames]

    feats = extract_features(frames, model)
    seq = interpolate_sequence(feats, model.interp)
    cfg = model.config
    if cfg.temporal == "none":
        hidden = seq
    elif cfg.bidirectional:
        hidden = run_bidirectional(seq, model.lstm)
    else:
        hidden = run_unidirectional(seq, model.lstm)

    stacked, steps = _stack_time(hidden)
    if cfg.fuses:
        stacked = model.fusion(stacked)
    return _unstack_time(reconstruct_frame(stacked, model), steps, squeeze)


def charbonnier_loss(pred: Sequence[Tensor], gt, eps: float = CHARBONNIER_EPS) -> Tensor:
    """Mean of ``sqrt(diff^2 + eps^2)`` over every frame, channel and pixel.

    Evaluated as ``eps + mean(diff^2 / (sqrt(diff^2 + eps^2) + eps))`` in float64,
    which is exact (``== eps``) at zero residual. Returns a float64 scalar.
    """
    pred = list(pred)
    gt = _as_frames(gt)
    if len(pred) != len(gt):
        raise ContractError(f"charbonnier_loss: {len(pred)} predictions vs {len(gt)} targets")
    for p, g in zip(pred, gt):
        if p.shape != g.shape:
            raise ContractError(f"charbonnier_loss: shape mismatch {p.shape} vs {g.shape}")
    diffs = [p.data.astype(np.float64) - g.data.astype(np.float64) for p, g in zip(pred, gt)]
    roots = [np.sqrt(d * d + eps * eps) for d in diffs]
    count = sum(d.size for d in diffs)
    excess = sum(float(np.sum(d * d / (r + eps))) for d, r in zip(diffs, roots))
    value = np.asarray(eps + excess / count, dtype=np.float64)

    def backward(g):
        grads = [g * d / r / count for d, r in zip(diffs, roots)]
        return [gr.astype(p.dtype) for gr, p in zip(grads, pred)] + [
            (-gr).astype(t.dtype) for gr, t in zip(grads, gt)
        ]
    return Tensor._from_op(value, (*pred, *gt), backward, "charbonnier_loss")
