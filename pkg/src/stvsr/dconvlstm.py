"""Deformable ConvLSTM.

Before each update the previous hidden and cell states are resampled by a
deformable convolution whose offsets are predicted from ``[state, feature]``,
so that the states line up with the current feature map. The gate update is
the standard ConvLSTM one (no peepholes), with a single fused 3x3 convolution
on ``[feature, aligned hidden]`` producing the gates in order (i, f, o, g).
"""

from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np

from .deform import AlignedSampler, OffsetPredictor, deformable_conv2d
from .nn import Conv2d, Module, _init_rng
from .tensor import (
    ContractError,
    Tensor,
    cat_batch,
    concat_channels,
    reshape,
    sigmoid,
    slice_channels,
    split_batch,
    tanh,
)


class LSTMState(NamedTuple):
    h: Tensor
    c: Tensor

    @classmethod
    def zeros_like(cls, feat: Tensor) -> "LSTMState":
        return cls(Tensor(np.zeros_like(feat.data)), Tensor(np.zeros_like(feat.data)))


class DConvLSTMParams(Module):
    """Gate convolution plus, when ``aligned``, state-alignment samplers for h and c.

    ``aligned=False`` gives a vanilla ConvLSTM.
    """

    def __init__(self, channels: int, aligned: bool = True, k: int = 3, rng=None):
        rng = _init_rng(rng)
        self.channels = channels
        self.aligned = aligned
        self.gates = Conv2d(2 * channels, 4 * channels, 3, rng=rng)
        if aligned:
            self.h_align = AlignedSampler(channels, k, rng=rng)
            self.c_align = AlignedSampler(channels, k, rng=rng)


def align_state(
    state: Tensor,
    feat: Tensor,
    predictor: OffsetPredictor,
    deform_weight: Tensor,
    deform_bias: Tensor | None = None,
) -> Tensor:
    """Resample ``state`` with offsets predicted from ``[state, feat]``."""
    if state.shape != feat.shape:
        raise ContractError(f"align_state: shape mismatch {state.shape} vs {feat.shape}")
    offsets = predictor(concat_channels([state, feat]))
    return deformable_conv2d(state, offsets, deform_weight, deform_bias)


def cell_step(prev: LSTMState | None, feat: Tensor, params: DConvLSTMParams) -> LSTMState:
    if prev is None:
        prev = LSTMState.zeros_like(feat)
    if prev.h.shape != feat.shape or prev.c.shape != feat.shape:
        raise ContractError(
            f"cell_step: state shapes {prev.h.shape}/{prev.c.shape} do not match feature {feat.shape}"
        )
    if feat.shape[-3] != params.channels:
        raise ContractError(f"cell_step: expected {params.channels} channels, got {feat.shape}")
    if params.aligned:
        ha = align_state(prev.h, feat, params.h_align.predictor, params.h_align.deform.weight,
                         params.h_align.deform.bias)
        ca = align_state(prev.c, feat, params.c_align.predictor, params.c_align.deform.weight,
                         params.c_align.deform.bias)
    else:
        ha, ca = prev
    gates = params.gates(concat_channels([feat, ha]))
    c = params.channels
    i = sigmoid(slice_channels(gates, 0, c))
    f = sigmoid(slice_channels(gates, c, 2 * c))
    o = sigmoid(slice_channels(gates, 2 * c, 3 * c))
    g = tanh(slice_channels(gates, 3 * c, 4 * c))
    c_new = f * ca + i * g
    h_new = o * tanh(c_new)
    return LSTMState(h_new, c_new)


def run_unidirectional(features: Sequence[Tensor], params: DConvLSTMParams) -> list[Tensor]:
    """Hidden state after each step of a forward scan from a zero state."""
    if not features:
        raise ContractError("run_unidirectional: empty sequence")
    state = None
    hidden = []
    for feat in features:
        state = cell_step(state, feat, params)
        hidden.append(state.h)
    return hidden


def run_bidirectional(features: Sequence[Tensor], params: DConvLSTMParams) -> list[Tensor]:
    """``concat(h_forward[t], h_backward[t])`` for every t (2C channels).

    The backward scan runs the same cell over the reversed sequence. Both scans
    are evaluated together by stacking them along the batch axis.
    """
    if not features:
        raise ContractError("run_bidirectional: empty sequence")
    shape = features[0].shape
    if len(shape) == 3:
        feats = [reshape(f, (1, *shape)) for f in features]
    else:
        feats = list(features)
    t_len = len(feats)
    stacked = [cat_batch([feats[t], feats[t_len - 1 - t]]) for t in range(t_len)]
    hidden = run_unidirectional(stacked, params)
    fwd, bwd = [], []
    for h in hidden:
        hf, hb = split_batch(h, 2)
        fwd.append(hf)
        bwd.append(hb)
    bwd.reverse()
    out = [concat_channels([hf, hb]) for hf, hb in zip(fwd, bwd)]
    if len(shape) == 3:
        out = [reshape(o, o.shape[1:]) for o in out]
    return out
