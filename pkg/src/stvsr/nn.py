"""Parameter containers: a minimal module tree with named, checkpointable parameters."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import ContractError, Tensor, conv2d, get_default_dtype, relu


def parameter(data: np.ndarray) -> Tensor:
    return Tensor(np.asarray(data, dtype=get_default_dtype()), requires_grad=True)


class Module:
    """Base class; parameters are discovered by walking attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise ContractError(f"state mismatch: missing {missing}, unexpected {unexpected}")
        for name, p in own.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ContractError(f"{name}: expected shape {p.shape}, got {value.shape}")
            p.data = value.astype(p.dtype, copy=True)


def _init_rng(rng) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def delta_kernel(c_out: int, c_in: int, k: int) -> np.ndarray:
    """Channel-identity kernel: tap at the centre, 1 where c_out == c_in."""
    w = np.zeros((c_out, c_in, k, k))
    for i in range(min(c_out, c_in)):
        w[i, i, k // 2, k // 2] = 1.0
    return w


class Conv2d(Module):
    """Same-padded stride-1 convolution, uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init."""

    def __init__(self, c_in: int, c_out: int, k: int = 3, bias: bool = True, rng=None, init: str = "uniform"):
        rng = _init_rng(rng)
        bound = 1.0 / np.sqrt(c_in * k * k)
        if init == "uniform":
            w = rng.uniform(-bound, bound, (c_out, c_in, k, k))
        elif init == "zeros":
            w = np.zeros((c_out, c_in, k, k))
        elif init == "delta":
            w = delta_kernel(c_out, c_in, k)
        else:
            raise ValueError(f"unknown init {init!r}")
        self.weight = parameter(w)
        if bias:
            b = rng.uniform(-bound, bound, c_out) if init == "uniform" else np.zeros(c_out)
            self.bias = parameter(b)
        else:
            self.bias = None
        self.padding = k // 2

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.padding)


class ResidualBlock(Module):
    """conv3x3 -> relu -> conv3x3 plus identity skip, no normalisation."""

    def __init__(self, channels: int, rng=None, res_scale: float = 0.1):
        rng = _init_rng(rng)
        self.conv1 = Conv2d(channels, channels, 3, rng=rng)
        self.conv2 = Conv2d(channels, channels, 3, rng=rng)
        # small residual branch at init keeps deep stacks close to identity
        self.conv2.weight.data *= res_scale
        self.conv2.bias.data *= res_scale

    def __call__(self, x: Tensor) -> Tensor:
        return x + self.conv2(relu(self.conv1(x)))
