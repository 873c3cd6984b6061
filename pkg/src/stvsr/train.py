"""Adam with a single cosine learning-rate arc, the training loop, and checkpoints."""

from __future__ import annotations

import logging
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import make_training_sample, stack_samples
from .network import ModelConfig, ZoomingModel, charbonnier_loss, forward
from .tensor import ContractError, Tensor

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"ZSLM"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    lr_max: float = 4e-4
    lr_min: float = 1e-7
    total_steps: int = 1000
    batch_size: int = 2
    seed: int = 0
    patch: int = 8
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    augment: bool = True

    def __post_init__(self):
        if not self.lr_min < self.lr_max:
            raise ContractError(f"lr_min ({self.lr_min}) must be below lr_max ({self.lr_max})")
        if self.total_steps < 1:
            raise ContractError(f"total_steps must be >= 1, got {self.total_steps}")
        if self.batch_size < 1 or self.patch < 1:
            raise ContractError(f"batch_size and patch must be positive")

    def as_dict(self) -> dict:
        return asdict(self)


def cosine_lr(step: int, cfg: TrainConfig) -> float:
    """``lr_min + (lr_max - lr_min) * (1 + cos(pi * step / total_steps)) / 2``."""
    if not 0 <= step <= cfg.total_steps:
        raise ContractError(f"cosine_lr: step {step} outside [0, {cfg.total_steps}]")
    if step == 0:
        return cfg.lr_max
    if step == cfg.total_steps:
        return cfg.lr_min
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * step / cfg.total_steps))


# ---------------------------------------------------------------------- Adam
@dataclass
class AdamState:
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    t: int = 0


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray | None],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, in place."""
    if len(params) != len(grads):
        raise ContractError(f"adam_step: {len(params)} params but {len(grads)} grads")
    for i, g in enumerate(grads):
        if g is None:
            raise ContractError(f"adam_step: parameter {i} has no gradient")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)


# ------------------------------------------------------------------ training
class NonFiniteLossError(FloatingPointError):
    def __init__(self, step: int, lr: float, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step} (lr {lr:.6g})")
        self.step = step
        self.lr = lr


@dataclass
class TrainResult:
    model: ZoomingModel
    log: list[tuple[int, float, float]]


def train_loop(
    model: ZoomingModel,
    dataset: Sequence[np.ndarray],
    cfg: TrainConfig,
    on_step: Callable[[int, float, float], None] | None = None,
) -> TrainResult:
    """Train on HR clips of 7 frames; returns the model and a (step, lr, loss) log.

    Each step draws ``batch_size`` clips with replacement, crops and augments
    them, and performs one Adam update at ``cosine_lr(step)``.
    """
    if len(dataset) == 0:
        raise ContractError("train_loop: empty dataset")
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    state = AdamState()
    log = []
    for step in range(cfg.total_steps):
        lr = cosine_lr(step, cfg)
        picks = rng.integers(len(dataset), size=cfg.batch_size)
        samples = [make_training_sample(dataset[i], cfg.patch, rng, cfg.augment) for i in picks]
        lr_frames, hr_frames = stack_samples(samples)
        model.zero_grad()
        loss = charbonnier_loss(forward(list(lr_frames), model), list(hr_frames))
        value = loss.item()
        if not math.isfinite(value):
            raise NonFiniteLossError(step, lr, value)
        loss.backward()
        adam_step(params, [p.grad for p in params], state, lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
        log.append((step, lr, value))
        if on_step is not None:
            on_step(step, lr, value)
    return TrainResult(model, log)


def write_loss_log(log: Sequence[tuple[int, float, float]], path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        for step, lr, loss in log:
            fh.write(f"{step}\t{lr:.9g}\t{loss:.9g}\n")


# --------------------------------------------------------------- checkpoints
class CheckpointError(Exception):
    """A checkpoint file is malformed."""


def save_checkpoint(model: ZoomingModel, path: str | os.PathLike) -> None:
    """Write all parameters as little-endian float32 in the ZSLM container."""
    entries = list(model.named_parameters())
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(entries))]
    for name, p in entries:
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack(f"<I{p.ndim}I", p.ndim, *p.shape))
        chunks.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path: str | os.PathLike) -> dict[str, np.ndarray]:
    """Parse a checkpoint into ``{name: float32 array}`` preserving file order."""
    buf = Path(path).read_bytes()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated while reading {what} at byte {pos}")
        out = buf[pos : pos + n]
        pos += n
        return out

    def u32(what: str) -> int:
        return struct.unpack("<I", take(4, what))[0]

    magic = take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r} at byte 0, expected {CHECKPOINT_MAGIC!r}")
    version = u32("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version} at byte 4")
    count = u32("entry count")
    state = {}
    for i in range(count):
        name_len = u32(f"name length of entry {i}")
        try:
            name = take(name_len, f"name of entry {i}").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"{path}: entry {i} name is not UTF-8 (byte {pos})") from exc
        rank = u32(f"rank of {name}")
        dims = tuple(u32(f"dim {d} of {name}") for d in range(rank))
        size = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(take(4 * size, f"values of {name}"), dtype="<f4").reshape(dims)
        state[name] = data.astype(np.float32)
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes after entry {count - 1}")
    return state


def config_from_state(state: dict[str, np.ndarray]) -> ModelConfig:
    """Recover the architecture from parameter names and shapes."""
    try:
        channels = state["extractor.conv_first.weight"].shape[0]
    except KeyError as exc:
        raise CheckpointError("checkpoint has no extractor.conv_first.weight entry") from exc

    def count(prefix: str) -> int:
        n = 0
        while f"{prefix}.{n}.conv1.weight" in state:
            n += 1
        return n

    if "lstm.gates.weight" not in state:
        temporal = "none"
    elif "lstm.h_align.predictor.conv1.weight" in state:
        temporal = "dconvlstm"
    else:
        temporal = "convlstm"
    return ModelConfig(
        channels=channels,
        k1=count("extractor.blocks"),
        k2=count("reconstructor.blocks"),
        feature_interp="deformable" if "interp.forward_branch.predictor.conv1.weight" in state else "naive",
        temporal=temporal,
        bidirectional="fusion.weight" in state,
    )


def load_checkpoint(path: str | os.PathLike, model: ZoomingModel | None = None) -> ZoomingModel:
    """Load parameters into ``model``, or into a new model whose config is inferred from the file."""
    state = read_checkpoint(path)
    if model is None:
        model = ZoomingModel(config_from_state(state))
    try:
        model.load_state_dict(state)
    except ContractError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    return model
