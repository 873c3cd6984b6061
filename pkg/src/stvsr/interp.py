"""Feature temporal interpolation: synthesise the midpoint feature map of two neighbours.

Each neighbour is resampled by its own branch (offsets predicted from the
channel concatenation of both neighbours, then a deformable convolution) and
the two results are blended with learnable 1x1 kernels.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .deform import AlignedSampler
from .nn import Conv2d, Module, _init_rng, parameter
from .tensor import ContractError, Tensor, add, cat_batch, conv2d, reshape, split_batch


class BlendKernels(Module):
    """1x1 blending kernels ``alpha`` and ``beta`` (no bias), initialised to 0.5 * identity."""

    def __init__(self, channels: int):
        eye = np.eye(channels).reshape(channels, channels, 1, 1)
        self.alpha = parameter(0.5 * eye)
        self.beta = parameter(0.5 * eye)

    def __call__(self, a: Tensor, b: Tensor) -> Tensor:
        return add(conv2d(a, self.alpha), conv2d(b, self.beta))


class NaiveBranch(Module):
    """Plain 3x3 convolution of one neighbour, ignoring the other (ablation baseline)."""

    def __init__(self, channels: int, rng=None):
        self.conv = Conv2d(channels, channels, 3, rng=rng, init="delta")

    def __call__(self, x: Tensor, guide: Tensor) -> Tensor:
        return self.conv(x)


class InterpParams(Module):
    """Parameters of the interpolation function.

    ``mode="deformable"`` uses offset-guided sampling in both branches;
    ``mode="naive"`` replaces each branch by a plain convolution.
    """

    def __init__(self, channels: int, mode: str = "deformable", k: int = 3, rng=None):
        rng = _init_rng(rng)
        if mode == "deformable":
            self.forward_branch = AlignedSampler(channels, k, rng=rng)
            self.backward_branch = AlignedSampler(channels, k, rng=rng)
        elif mode == "naive":
            self.forward_branch = NaiveBranch(channels, rng=rng)
            self.backward_branch = NaiveBranch(channels, rng=rng)
        else:
            raise ValueError(f"unknown interpolation mode {mode!r}")
        self.mode = mode
        self.blend = BlendKernels(channels)


def interpolate_pair(f1: Tensor, f3: Tensor, params: InterpParams) -> Tensor:
    """Midpoint feature map between ``f1`` and ``f3`` (same shape as either)."""
    if f1.shape != f3.shape:
        raise ContractError(f"interpolate_pair: shape mismatch {f1.shape} vs {f3.shape}")
    sampled1 = params.forward_branch(f1, f3)
    sampled3 = params.backward_branch(f3, f1)
    return params.blend(sampled1, sampled3)


def interpolate_sequence(features: Sequence[Tensor], params: InterpParams) -> list[Tensor]:
    """Interleave ``n + 1`` input maps with ``n`` synthesised midpoints.

    Inputs pass through untouched at even output positions. All pairs are
    evaluated in one batched call.
    """
    if len(features) < 2:
        raise ContractError(f"interpolate_sequence needs at least 2 feature maps, got {len(features)}")
    shape = features[0].shape
    for f in features:
        if f.shape != shape:
            raise ContractError(f"interpolate_sequence: shape mismatch {shape} vs {f.shape}")
    n = len(features) - 1
    if n == 1:
        mids = [interpolate_pair(features[0], features[1], params)]
    else:
        batched = len(shape) == 4
        lifted = features if batched else [reshape(f, (1, *shape)) for f in features]
        left = cat_batch(lifted[:-1])
        right = cat_batch(lifted[1:])
        mids = split_batch(interpolate_pair(left, right, params), n)
        if not batched:
            mids = [reshape(m, shape) for m in mids]
    out: list[Tensor] = []
    for t in range(n):
        out.extend((features[t], mids[t]))
    out.append(features[n])
    return out

