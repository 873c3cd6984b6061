"""Frame I/O, bicubic LR generation, training-sample construction and toy clips.

Frame sequences are float32 arrays of shape ``T x 3 x H x W`` with values in
``[0, 1]``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .tensor import ContractError

FRAME_PATTERN = "frame_{:06d}.png"
CLIP_LENGTH = 7


class IngestionError(Exception):
    """A frame directory could not be read into a consistent sequence."""


# ------------------------------------------------------------------------ I/O
def load_frames(dir_path: str | os.PathLike) -> np.ndarray:
    """Decode every PNG in ``dir_path`` (lexicographic order) to a ``T x 3 x H x W`` array."""
    root = Path(dir_path)
    if not root.is_dir():
        raise IngestionError(f"{root}: not a directory")
    files = sorted(p for p in root.iterdir() if p.suffix.lower() == ".png")
    if not files:
        raise IngestionError(f"{root}: no PNG frames found")
    frames = []
    for path in files:
        try:
            with Image.open(path) as img:
                arr = np.asarray(img.convert("RGB"), dtype=np.uint8)
        except Exception as exc:  # PIL raises several unrelated types
            raise IngestionError(f"{path}: cannot decode PNG ({exc})") from exc
        if frames and arr.shape != frames[0].shape:
            raise IngestionError(
                f"{path}: size {arr.shape[1]}x{arr.shape[0]} differs from "
                f"{frames[0].shape[1]}x{frames[0].shape[0]} of {files[0].name}"
            )
        frames.append(arr)
    return np.stack(frames).transpose(0, 3, 1, 2).astype(np.float32) / 255.0


def to_uint8(frame: np.ndarray) -> np.ndarray:
    """``3 x H x W`` float frame -> ``H x W x 3`` uint8, clamped to [0, 1]."""
    return np.round(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def save_frames(frames, dir_path: str | os.PathLike, start: int = 0) -> list[Path]:
    root = Path(dir_path)
    root.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, frame in enumerate(frames):
        path = root / FRAME_PATTERN.format(start + i)
        Image.fromarray(to_uint8(np.asarray(frame))).save(path)
        paths.append(path)
    return paths


# -------------------------------------------------------------------- bicubic
def cubic(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Keys cubic convolution kernel, support |t| < 2."""
    t = np.abs(np.asarray(t, dtype=np.float64))
    t2, t3 = t * t, t * t * t
    near = (a + 2) * t3 - (a + 3) * t2 + 1
    far = a * t3 - 5 * a * t2 + 8 * a * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


def _fold(index: np.ndarray, n: int) -> np.ndarray:
    """Half-sample symmetric reflection of integer indices into [0, n)."""
    m = np.mod(index, 2 * n)
    return np.where(m < n, m, 2 * n - 1 - m)


def downsample_matrix(n_in: int, factor: int) -> np.ndarray:
    """Dense ``n_in/factor x n_in`` antialiased bicubic resampling matrix.

    Output sample ``i`` sits at input coordinate ``(i + 0.5) * factor - 0.5``;
    the kernel is stretched by ``factor`` (support ``2 * factor`` each side),
    weights are normalised to sum to one and out-of-range taps are reflected.
    """
    n_out = n_in // factor
    mat = np.zeros((n_out, n_in))
    reach = 2 * factor
    for i in range(n_out):
        centre = (i + 0.5) * factor - 0.5
        taps = np.arange(int(np.floor(centre - reach)) + 1, int(np.ceil(centre + reach)))
        weights = cubic((taps - centre) / factor)
        weights /= weights.sum()
        np.add.at(mat[i], _fold(taps, n_in), weights)
    return mat


def bicubic_downsample(frames: np.ndarray, factor: int = 4) -> np.ndarray:
    """Downsample a ``... x H x W`` array by ``factor``; output clamped to [0, 1]."""
    frames = np.asarray(frames)
    h, w = frames.shape[-2:]
    if h % factor or w % factor:
        raise ContractError(f"bicubic_downsample: size {h}x{w} not divisible by {factor}")
    mh = downsample_matrix(h, factor)
    mw = downsample_matrix(w, factor)
    out = np.einsum("ih,...hw,jw->...ij", mh, frames.astype(np.float64), mw)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# ------------------------------------------------------------------- samples
@dataclass
class TrainingSample:
    lr_input: np.ndarray  # 4 x 3 x h x w
    hr_target: np.ndarray  # 7 x 3 x 4h x 4w


def augment_clip(clip: np.ndarray, rotations: int, flip: bool) -> np.ndarray:
    """Rotate by ``rotations`` quarter turns then optionally mirror horizontally."""
    out = np.rot90(clip, k=rotations, axes=(-2, -1))
    if flip:
        out = out[..., ::-1]
    return np.ascontiguousarray(out)


def make_training_sample(
    hr_clip: np.ndarray, patch: int, rng: np.random.Generator, augment: bool = True
) -> TrainingSample:
    hr_clip = np.asarray(hr_clip, dtype=np.float32)
    if len(hr_clip) != CLIP_LENGTH:
        raise ContractError(f"make_training_sample: clip must have {CLIP_LENGTH} frames, got {len(hr_clip)}")
    size = 4 * patch
    h, w = hr_clip.shape[-2:]
    if h < size or w < size:
        raise ContractError(f"make_training_sample: clip {h}x{w} smaller than HR patch {size}")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    crop = hr_clip[..., top : top + size, left : left + size]
    if augment:
        crop = augment_clip(crop, int(rng.integers(4)), bool(rng.random() < 0.5))
    lr = bicubic_downsample(crop[0::2])
    for k in range(len(lr)):
        if not np.array_equal(lr[k], bicubic_downsample(crop[2 * k])):
            raise AssertionError(f"LR frame {k} is not the downsampled HR frame {2 * k}")
    return TrainingSample(lr_input=lr, hr_target=np.ascontiguousarray(crop))


def stack_samples(samples: list[TrainingSample]) -> tuple[np.ndarray, np.ndarray]:
    """Batch samples time-major: ``T x N x 3 x h x w`` inputs and targets."""
    lr = np.stack([s.lr_input for s in samples], axis=1)
    hr = np.stack([s.hr_target for s in samples], axis=1)
    return lr, hr


# ----------------------------------------------------------------- toy clips
def random_texture(height: int, width: int, rng: np.random.Generator, sigma: float = 2.0) -> np.ndarray:
    """Smoothed colour noise rescaled per channel to [0.05, 0.95]."""
    noise = rng.standard_normal((3, height, width))
    tex = ndimage.gaussian_filter(noise, sigma=(0, sigma, sigma), mode="wrap")
    lo = tex.min(axis=(1, 2), keepdims=True)
    hi = tex.max(axis=(1, 2), keepdims=True)
    return (0.05 + 0.9 * (tex - lo) / (hi - lo)).astype(np.float32)


def bounce_positions(start: int, velocity: int, limit: int, length: int) -> np.ndarray:
    """Positions of a point moving at constant speed, reflecting off 0 and ``limit``."""
    if limit == 0:
        return np.zeros(length, dtype=np.int64)
    raw = start + velocity * np.arange(length)
    m = np.mod(raw, 2 * limit)
    return np.where(m <= limit, m, 2 * limit - m)


def _random_speed(rng: np.random.Generator, speed: tuple[int, int]) -> int:
    magnitude = int(rng.integers(speed[0], speed[1] + 1))
    return magnitude if rng.random() < 0.5 else -magnitude


def synthesize_toy_clip(
    kind: str,
    size: int,
    length: int = CLIP_LENGTH,
    rng: np.random.Generator | int | None = None,
    speed: tuple[int, int] = (1, 3),
    velocity: tuple[int, int] | None = None,
    sigma: float = 2.0,
) -> np.ndarray:
    """Synthetic HR clip with known motion.

    ``shift``: a viewport slides over a static texture by ``velocity`` = (dy, dx)
    pixels per frame, so ``frame[t+1][y, x] == frame[t][y + dy, x + dx]``.
    ``rotate``: the texture rotates about the frame centre by 3 degrees per frame.
    ``bounce``: a textured square moves over a textured background, reflecting
    at the borders (see :func:`bounce_positions`).
    """
    if size < 16:
        raise ContractError(f"synthesize_toy_clip: size must be >= 16, got {size}")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    if kind == "shift":
        dy, dx = velocity if velocity is not None else (_random_speed(rng, speed), _random_speed(rng, speed))
        span_y, span_x = abs(dy) * (length - 1), abs(dx) * (length - 1)
        canvas = random_texture(size + span_y, size + span_x, rng, sigma)
        y0 = 0 if dy >= 0 else span_y
        x0 = 0 if dx >= 0 else span_x
        frames = [
            canvas[:, y0 + dy * t : y0 + dy * t + size, x0 + dx * t : x0 + dx * t + size]
            for t in range(length)
        ]
    elif kind == "rotate":
        big = int(np.ceil(size * 1.5))
        canvas = random_texture(big, big, rng, sigma)
        lo = (big - size) // 2
        frames = []
        for t in range(length):
            rot = ndimage.rotate(canvas, 3.0 * t, axes=(1, 2), reshape=False, order=1, mode="reflect")
            frames.append(rot[:, lo : lo + size, lo : lo + size])
    elif kind == "bounce":
        background = random_texture(size, size, rng, sigma)
        side = size // 4
        sprite = random_texture(side, side, rng, sigma / 2)
        limit = size - side
        vy, vx = velocity if velocity is not None else (_random_speed(rng, speed), _random_speed(rng, speed))
        ys = bounce_positions(int(rng.integers(0, limit + 1)), vy, limit, length)
        xs = bounce_positions(int(rng.integers(0, limit + 1)), vx, limit, length)
        frames = []
        for y, x in zip(ys, xs):
            frame = background.copy()
            frame[:, y : y + side, x : x + side] = sprite
            frames.append(frame)
    else:
        raise ContractError(f"unknown toy clip kind {kind!r}; expected shift, rotate or bounce")
    return np.clip(np.stack(frames), 0.0, 1.0).astype(np.float32)
