"""Dense tensors with a small set of differentiable operations.

Every operation records its inputs and a backward rule on the output tensor.
``Tensor.backward`` replays those rules in reverse creation order, which is a
valid reverse topological order because an output is always created after its
inputs.

Feature maps are ``C x H x W``; an optional batch dimension goes in front
(``N x C x H x W``). Channel-wise operations always use axis ``-3``.
"""

from __future__ import annotations

import contextlib
import itertools
import os
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ContractError",
    "Tensor",
    "add",
    "bilinear_sample",
    "cat_batch",
    "concat_channels",
    "conv2d",
    "get_default_dtype",
    "inject_fault",
    "leaky_relu",
    "mean",
    "mul",
    "no_grad",
    "pixel_shuffle",
    "pixel_unshuffle",
    "precision",
    "relu",
    "reshape",
    "scalar_mul",
    "set_debug",
    "sigmoid",
    "slice_channels",
    "split_batch",
    "sub",
    "sum",
    "tanh",
]


class ContractError(ValueError):
    """Raised when an operation is called with arguments violating its contract."""


_default_dtype = np.dtype(np.float32)
_grad_enabled = True
_debug = bool(os.environ.get("STVSR_DEBUG"))
_faults: set[str] = set()
_creation = itertools.count()


def get_default_dtype() -> np.dtype:
    return _default_dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype used for new tensors and parameters."""
    global _default_dtype
    previous = _default_dtype
    _default_dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _default_dtype = previous


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def set_debug(enabled: bool) -> None:
    """Enable finiteness checks on every operation output."""
    global _debug
    _debug = bool(enabled)


@contextlib.contextmanager
def inject_fault(name: str) -> Iterator[None]:
    """Perturb the backward rule of operation ``name`` (negative control for gradient checks)."""
    _faults.add(name)
    try:
        yield
    finally:
        _faults.discard(name)


def _faulty(name: str, grad: np.ndarray) -> np.ndarray:
    if name in _faults:
        return grad * 1.01
    return grad


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_order")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype.kind == "f":
                dtype = data.dtype
            else:
                dtype = _default_dtype
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._order = -1
        if _debug:
            _check_finite(self.data, "tensor construction")

    @classmethod
    def _from_op(
        cls,
        data: np.ndarray,
        parents: Sequence["Tensor"],
        backward: Callable[[np.ndarray], Sequence[np.ndarray | None]],
        name: str = "op",
    ) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
            out._order = next(_creation)
        else:
            out._parents = ()
            out._backward = None
            out._order = -1
        if _debug:
            _check_finite(data, name)
        return out

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else _add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else _add_scalar(self, -other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scalar_mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)

    # ---------------------------------------------------------------- autodiff
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``grad`` of every reachable leaf.

        Gradients accumulate across calls; reset them with ``zero_grad``.
        """
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise ContractError("backward() on a tensor that does not require grad")

        nodes: list[Tensor] = []
        seen: set[int] = set()
        stack = [self]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(p for p in node._parents if p.requires_grad)

        pending: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        leaves = [n for n in nodes if n._backward is None]
        for node in sorted((n for n in nodes if n._backward is not None), key=lambda n: -n._order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg
        for leaf in leaves:
            g = pending.pop(id(leaf), None)
            if g is None:
                continue
            g = g.astype(leaf.dtype, copy=False).reshape(leaf.shape)
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def _check_finite(data: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {name}")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(name: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ContractError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise
def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return Tensor._from_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return Tensor._from_op(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return Tensor._from_op(
        a.data * b.data, (a, b), lambda g: (_faulty("mul", g * b.data), g * a.data), "mul"
    )


def scalar_mul(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return Tensor._from_op(a.data * a.dtype.type(s), (a,), lambda g: (g * s,), "scalar_mul")


def _add_scalar(a: Tensor, s: float) -> Tensor:
    return Tensor._from_op(a.data + a.dtype.type(s), (a,), lambda g: (g,), "add_scalar")


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors the operation name
    return Tensor._from_op(
        np.asarray(a.data.sum(), dtype=a.dtype),
        (a,),
        lambda g: (np.broadcast_to(g, a.shape).copy(),),
        "sum",
    )


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return Tensor._from_op(
        np.asarray(a.data.mean(), dtype=a.dtype),
        (a,),
        lambda g: (np.full(a.shape, g / n, dtype=a.dtype),),
        "mean",
    )


# ---------------------------------------------------------------- activations
def sigmoid(x: Tensor) -> Tensor:
    # split by sign to avoid overflow in exp
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype, copy=False)
    return Tensor._from_op(y, (x,), lambda g: (_faulty("sigmoid", g * y * (1 - y)),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return Tensor._from_op(y, (x,), lambda g: (_faulty("tanh", g * (1 - y * y)),), "tanh")


def relu(x: Tensor) -> Tensor:
    return leaky_relu(x, 0.0)


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    """Leaky ReLU; at exactly zero the negative-side slope is used for the gradient."""
    positive = x.data > 0
    s = x.dtype.type(slope)
    y = np.where(positive, x.data, x.data * s)
    scale = np.where(positive, x.dtype.type(1), s)
    return Tensor._from_op(
        y, (x,), lambda g: (_faulty("leaky_relu", g * scale),), "leaky_relu"
    )


# ----------------------------------------------------------------- structural
def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return Tensor._from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis (-3); all other extents must agree."""
    if not tensors:
        raise ContractError("concat_channels: empty input")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or t.shape[:-3] != ref[:-3] or t.shape[-2:] != ref[-2:]:
            raise ContractError(f"concat_channels: incompatible shapes {ref} and {t.shape}")
    bounds = np.cumsum([0] + [t.shape[-3] for t in tensors])

    def backward(g):
        return tuple(g[..., bounds[i] : bounds[i + 1], :, :] for i in range(len(tensors)))

    data = np.concatenate([t.data for t in tensors], axis=-3)
    return Tensor._from_op(data, tuple(tensors), backward, "concat_channels")


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    def backward(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[..., start:stop, :, :] = g
        return (full,)

    return Tensor._from_op(x.data[..., start:stop, :, :], (x,), backward, "slice_channels")


def cat_batch(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate 4-D tensors along the batch axis."""
    if not tensors:
        raise ContractError("cat_batch: empty input")
    for t in tensors:
        if t.ndim != 4 or t.shape[1:] != tensors[0].shape[1:]:
            raise ContractError(f"cat_batch: incompatible shapes {tensors[0].shape} and {t.shape}")
    bounds = np.cumsum([0] + [t.shape[0] for t in tensors])

    def backward(g):
        return tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(tensors)))

    return Tensor._from_op(
        np.concatenate([t.data for t in tensors], axis=0), tuple(tensors), backward, "cat_batch"
    )


def split_batch(x: Tensor, parts: int) -> list[Tensor]:
    """Split a 4-D tensor into ``parts`` equal chunks along the batch axis."""
    if x.ndim != 4 or x.shape[0] % parts:
        raise ContractError(f"split_batch: cannot split shape {x.shape} into {parts} parts")
    size = x.shape[0] // parts
    out = []
    for i in range(parts):
        lo, hi = i * size, (i + 1) * size

        def backward(g, lo=lo, hi=hi):
            full = np.zeros(x.shape, dtype=g.dtype)
            full[lo:hi] = g
            return (full,)

        out.append(Tensor._from_op(x.data[lo:hi], (x,), backward, "split_batch"))
    return out


def _batched(x: Tensor) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise ContractError(f"expected a C x H x W or N x C x H x W tensor, got shape {x.shape}")


# ---------------------------------------------------------------- convolution
def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: int = 0) -> Tensor:
    """Stride-1 cross-correlation with zero padding."""
    xd, squeeze = _batched(x)
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3] or weight.shape[2] % 2 == 0:
        raise ContractError(f"conv2d: weight must be C_out x C_in x K x K with odd K, got {weight.shape}")
    n, c, h, w = xd.shape
    c_out, c_in, k, _ = weight.shape
    if c != c_in:
        raise ContractError(f"conv2d: input shape {x.shape} does not match weight shape {weight.shape}")
    if padding < 0:
        raise ContractError(f"conv2d: negative padding {padding}")
    if bias is not None and bias.shape != (c_out,):
        raise ContractError(f"conv2d: bias shape {bias.shape} does not match {c_out} output channels")
    ho, wo = h + 2 * padding - k + 1, w + 2 * padding - k + 1
    if ho < 1 or wo < 1:
        raise ContractError(f"conv2d: kernel {k} too large for input {x.shape} with padding {padding}")

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))  # n, c, ho, wo, k, k
    cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    w2 = weight.data.reshape(c_out, c * k * k)
    out = cols @ w2.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2))
    if squeeze:
        out = out[0]

    def backward(g):
        g2 = (g[None] if squeeze else g).transpose(0, 2, 3, 1).reshape(-1, c_out)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ w2).reshape(n, ho, wo, c, k, k)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for ky in range(k):
                for kx in range(k):
                    gxp[:, :, ky : ky + ho, kx : kx + wo] += gcols[..., ky, kx].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
            gx = _faulty("conv2d", gx[0] if squeeze else gx)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward, "conv2d")


# -------------------------------------------------------------- pixel shuffle
def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Rearrange ``r^2 C x H x W`` into ``C x rH x rW``.

    ``out[c, r*h + dy, r*w + dx] = in[c*r*r + dy*r + dx, h, w]``
    """
    xd, squeeze = _batched(x)
    n, c, h, w = xd.shape
    if c % (r * r):
        raise ContractError(f"pixel_shuffle: {c} channels not divisible by r^2 = {r * r}")
    co = c // (r * r)
    out = xd.reshape(n, co, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, co, h * r, w * r)
    if squeeze:
        out = out[0]

    def backward(g):
        gd = g[None] if squeeze else g
        gi = gd.reshape(n, co, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c, h, w)
        return (_faulty("pixel_shuffle", gi[0] if squeeze else gi),)

    return Tensor._from_op(np.ascontiguousarray(out), (x,), backward, "pixel_shuffle")


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Inverse of :func:`pixel_shuffle`."""
    xd, squeeze = _batched(x)
    n, c, hr, wr = xd.shape
    if hr % r or wr % r:
        raise ContractError(f"pixel_unshuffle: spatial size {hr}x{wr} not divisible by {r}")
    h, w = hr // r, wr // r
    out = xd.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, h, w)
    if squeeze:
        out = out[0]

    def backward(g):
        gd = g[None] if squeeze else g
        gi = gd.reshape(n, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, hr, wr)
        return (gi[0] if squeeze else gi,)

    return Tensor._from_op(np.ascontiguousarray(out), (x,), backward, "pixel_unshuffle")


# ------------------------------------------------------------------- sampling
def bilinear_sample(x: Tensor, y: float, xx: float) -> Tensor:
    """Sample every channel of a ``C x H x W`` map at fractional position (y, x).

    Grid cells outside ``[0, H) x [0, W)`` contribute zero.
    """
    if x.ndim != 3:
        raise ContractError(f"bilinear_sample expects C x H x W, got {x.shape}")
    _, h, w = x.shape
    y0, x0 = int(np.floor(y)), int(np.floor(xx))
    fy, fx = y - y0, xx - x0
    out = np.zeros(x.shape[0], dtype=np.float64)
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            yy, xc = y0 + dy, x0 + dx
            if 0 <= yy < h and 0 <= xc < w:
                out += wy * wx * x.data[:, yy, xc]
    return Tensor(out.astype(x.dtype))
