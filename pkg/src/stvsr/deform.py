"""Single-level deformable convolution and its offset predictor.

Offset layout: channel ``2k`` holds the row displacement and ``2k + 1`` the
column displacement of kernel tap ``k`` (taps in row-major order), in pixels of
the sampled feature grid. Samples falling outside the map read zeros.
"""

from __future__ import annotations

import numpy as np
from scipy import sparse

from .nn import Conv2d, Module, _init_rng, delta_kernel, parameter
from .tensor import ContractError, Tensor, _batched, _faulty, concat_channels, leaky_relu


def tap_positions(k: int) -> tuple[np.ndarray, np.ndarray]:
    """Relative (row, col) of each tap of a K x K kernel, row-major."""
    r = np.arange(k) - k // 2
    ry, rx = np.meshgrid(r, r, indexing="ij")
    return ry.reshape(-1), rx.reshape(-1)


def _sampling_matrices(offsets: np.ndarray, h: int, w: int, k: int, dtype):
    """Sparse bilinear sampling operator plus its derivatives w.r.t. row/col position.

    Rows are ordered (n, y, x, tap); columns index the flattened (n, y, x) input grid.
    """
    n = offsets.shape[0]
    kk = k * k
    ry, rx = tap_positions(k)
    ys = np.arange(h, dtype=np.float64)[None, :, None, None]
    xs = np.arange(w, dtype=np.float64)[None, None, :, None]
    off = offsets.astype(np.float64, copy=False)
    py = ys + ry + off[:, 0::2].transpose(0, 2, 3, 1)  # n, h, w, kk
    px = xs + rx + off[:, 1::2].transpose(0, 2, 3, 1)
    y0 = np.floor(py)
    x0 = np.floor(px)
    fy = py - y0
    fx = px - x0
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)
    base = (np.arange(n) * h * w)[:, None, None, None]

    cols, vals, dys, dxs = [], [], [], []
    for cy, cx, wv, gy, gx in (
        (0, 0, (1 - fy) * (1 - fx), -(1 - fx), -(1 - fy)),
        (0, 1, (1 - fy) * fx, -fx, 1 - fy),
        (1, 0, fy * (1 - fx), 1 - fx, -fy),
        (1, 1, fy * fx, fx, fy),
    ):
        yy = y0 + cy
        xx = x0 + cx
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        cols.append(np.where(valid, base + yy * w + xx, 0))
        vals.append(np.where(valid, wv, 0.0))
        dys.append(np.where(valid, gy, 0.0))
        dxs.append(np.where(valid, gx, 0.0))

    m = n * h * w * kk
    indices = np.stack([c.reshape(-1) for c in cols], axis=1).reshape(-1)
    indptr = np.arange(0, 4 * m + 1, 4)
    shape = (m, n * h * w)

    def build(parts):
        data = np.stack([p.reshape(-1) for p in parts], axis=1).reshape(-1).astype(dtype)
        return sparse.csr_matrix((data, indices, indptr), shape=shape)

    return build(vals), build(dys), build(dxs)


def deformable_conv2d(x: Tensor, offsets: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Deformable convolution with same-padding geometry.

    ``out[o, y, x] = bias[o] + sum_{c,k} weight[o, c, k] * sample(x_c, (y, x) + r_k + offset_k(y, x))``
    Differentiable with respect to the input, offsets, weight and bias.
    """
    xd, squeeze = _batched(x)
    od, _ = _batched(offsets)
    n, c, h, w = xd.shape
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3] or weight.shape[2] % 2 == 0:
        raise ContractError(f"deformable_conv2d: bad weight shape {weight.shape}")
    c_out, c_in, k, _ = weight.shape
    kk = k * k
    if c_in != c:
        raise ContractError(f"deformable_conv2d: input {x.shape} does not match weight {weight.shape}")
    if od.shape != (n, 2 * kk, h, w):
        raise ContractError(
            f"deformable_conv2d: offsets must be {(2 * kk, h, w)} for K={k}, got {offsets.shape}"
        )

    S, Sy, Sx = _sampling_matrices(od, h, w, k, xd.dtype)
    xf = xd.transpose(0, 2, 3, 1).reshape(n * h * w, c)
    sampled = np.asarray(S @ xf).reshape(n * h * w, kk * c)
    w2 = weight.data.reshape(c_out, c, kk).transpose(0, 2, 1).reshape(c_out, kk * c)
    out = sampled @ w2.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, h, w, c_out).transpose(0, 3, 1, 2))
    if squeeze:
        out = out[0]

    def backward(g):
        g2 = (g[None] if squeeze else g).transpose(0, 2, 3, 1).reshape(-1, c_out)
        gw = gb = gx = goff = None
        if weight.requires_grad:
            gw = (g2.T @ sampled).reshape(c_out, kk, c).transpose(0, 2, 1).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        gs = (g2 @ w2).reshape(n * h * w * kk, c)
        if x.requires_grad:
            gx = np.asarray(S.T @ gs).reshape(n, h, w, c).transpose(0, 3, 1, 2)
            gx = gx[0] if squeeze else gx
        if offsets.requires_grad:
            gy = np.einsum("mc,mc->m", gs, np.asarray(Sy @ xf)).reshape(n, h, w, kk)
            gxx = np.einsum("mc,mc->m", gs, np.asarray(Sx @ xf)).reshape(n, h, w, kk)
            goff = np.empty(od.shape, dtype=g.dtype)
            goff[:, 0::2] = gy.transpose(0, 3, 1, 2)
            goff[:, 1::2] = gxx.transpose(0, 3, 1, 2)
            goff = _faulty("deformable_conv2d", goff[0] if squeeze else goff)
        return gx, goff, gw, gb

    parents = (x, offsets, weight) if bias is None else (x, offsets, weight, bias)
    return Tensor._from_op(out, parents, backward, "deformable_conv2d")


class OffsetPredictor(Module):
    """3x3 conv -> leaky_relu(0.1) -> 3x3 conv producing 2*K*K offset channels.

    The last layer starts at zero, so a fresh predictor yields zero offsets.
    """

    def __init__(self, c_in: int, k: int = 3, c_mid: int | None = None, rng=None):
        if c_in < 1 or k < 1:
            raise ContractError(f"OffsetPredictor: c_in and k must be positive, got {c_in}, {k}")
        rng = _init_rng(rng)
        c_mid = c_in if c_mid is None else c_mid
        self.k = k
        self.conv1 = Conv2d(c_in, c_mid, 3, rng=rng)
        self.conv2 = Conv2d(c_mid, 2 * k * k, 3, rng=rng, init="zeros")

    def __call__(self, x: Tensor) -> Tensor:
        return self.conv2(leaky_relu(self.conv1(x), 0.1))


def make_offset_predictor(c_in: int, k: int, rng=None) -> OffsetPredictor:
    return OffsetPredictor(c_in, k, rng=rng)


class DeformConv(Module):
    """Deformable convolution weights, delta-initialised so that zero offsets give the identity."""

    def __init__(self, channels: int, k: int = 3):
        self.weight = parameter(delta_kernel(channels, channels, k))
        self.bias = parameter(np.zeros(channels))

    def __call__(self, x: Tensor, offsets: Tensor) -> Tensor:
        return deformable_conv2d(x, offsets, self.weight, self.bias)


class AlignedSampler(Module):
    """Predict offsets from ``[x, guide]`` and resample ``x`` with them."""

    def __init__(self, channels: int, k: int = 3, rng=None):
        self.predictor = OffsetPredictor(2 * channels, k, rng=rng)
        self.deform = DeformConv(channels, k)

    def __call__(self, x: Tensor, guide: Tensor) -> Tensor:
        return self.deform(x, self.predictor(concat_channels([x, guide])))
