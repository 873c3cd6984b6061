"""Central finite-difference checks for reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numerical_grad(
    fn: Callable[[], Tensor],
    target: Tensor,
    step: float = 1e-5,
    indices: Sequence[int] | None = None,
) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. entries of ``target`` (perturbed in place)."""
    flat = target.data.reshape(-1)
    picks = range(flat.size) if indices is None else indices
    out = np.zeros(len(picks))
    for j, i in enumerate(picks):
        orig = flat[i]
        flat[i] = orig + step
        plus = fn().item()
        flat[i] = orig - step
        minus = fn().item()
        flat[i] = orig
        out[j] = (plus - minus) / (2 * step)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``||a - n|| / max(||a||, ||n||)``; zero when both vanish."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def check_gradients(
    fn: Callable[[], Tensor],
    inputs: dict[str, Tensor],
    step: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> dict[str, float]:
    """Compare backward() against finite differences for each named input.

    With ``max_entries`` only a random subset of each input's entries is probed.
    Returns the relative error per input.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    for t in inputs.values():
        t.grad = None
    loss = fn()
    loss.backward()
    errors = {}
    for name, t in inputs.items():
        analytic = np.zeros(t.shape) if t.grad is None else t.grad
        idx = None
        if max_entries is not None and t.data.size > max_entries:
            idx = rng.choice(t.data.size, size=max_entries, replace=False)
        numeric = numerical_grad(fn, t, step, idx)
        picked = analytic.reshape(-1) if idx is None else analytic.reshape(-1)[idx]
        errors[name] = relative_error(picked, numeric)
    return errors
