"""Desk-scale training demonstrations on synthetic shift clips."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .data import bicubic_downsample, synthesize_toy_clip
from .metrics import psnr
from .network import ModelConfig, ZoomingModel, forward
from .tensor import no_grad
from .train import TrainConfig, train_loop

# the default 4e-4 peak converges too slowly for a 2000-step CPU budget
DESK_LR_MAX = 2e-3


def evaluate_clip(model: ZoomingModel, hr_clip: np.ndarray) -> list[float]:
    """PSNR of each reconstructed frame when the downsampled frames 0, 2, 4, 6 are fed in."""
    lr = bicubic_downsample(hr_clip[0::2])
    with no_grad():
        out = forward(list(lr), model)
    return [psnr(o.data, g) for o, g in zip(out, hr_clip)]


@dataclass
class OverfitResult:
    final_loss: float
    frame_psnr: list[float]
    seconds: float
    log: list = field(repr=False, default_factory=list)
    model: ZoomingModel | None = field(repr=False, default=None)
    clip: np.ndarray | None = field(repr=False, default=None)


def overfit_demo(
    steps: int = 2000,
    size: int = 32,
    seed: int = 0,
    lr_max: float = DESK_LR_MAX,
    model_config: ModelConfig | None = None,
) -> OverfitResult:
    """Fit the desk model (ablation e) to a single 7-frame shift clip."""
    clip = synthesize_toy_clip("shift", size, rng=seed)
    model = ZoomingModel(model_config or ModelConfig.desk())
    cfg = TrainConfig(total_steps=steps, batch_size=1, patch=size // 4, augment=False, lr_max=lr_max, seed=seed)
    start = time.perf_counter()
    result = train_loop(model, [clip], cfg)
    return OverfitResult(
        final_loss=result.log[-1][2],
        frame_psnr=evaluate_clip(model, clip),
        seconds=time.perf_counter() - start,
        log=result.log,
        model=model,
        clip=clip,
    )


@dataclass
class AblationResult:
    mean_psnr: dict[str, float]
    seconds: dict[str, float]


def shift_clips(count: int, size: int, seed: int, speed=(2, 3)) -> list[np.ndarray]:
    return [
        synthesize_toy_clip("shift", size, rng=np.random.default_rng((seed, i)), speed=speed)
        for i in range(count)
    ]


def ablation_study(
    variants=("a", "b", "d", "e"),
    steps: int = 1500,
    train_clips: int = 16,
    test_clips: int = 8,
    batch_size: int = 2,
    seed: int = 0,
    lr_max: float = DESK_LR_MAX,
) -> AblationResult:
    """Train each variant on the same clips and report mean held-out PSNR."""
    train_set = shift_clips(train_clips, 64, seed=1000 + seed)
    test_set = shift_clips(test_clips, 64, seed=2000 + seed)
    cfg = TrainConfig(total_steps=steps, batch_size=batch_size, patch=8, lr_max=lr_max, seed=seed)
    means, seconds = {}, {}
    for letter in variants:
        model = ZoomingModel(ModelConfig.desk().with_ablation(letter))
        start = time.perf_counter()
        train_loop(model, train_set, cfg)
        seconds[letter] = time.perf_counter() - start
        means[letter] = float(np.mean([np.mean(evaluate_clip(model, clip)) for clip in test_set]))
    return AblationResult(means, seconds)
