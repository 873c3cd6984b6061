"""Invariant and gradient checks runnable from the command line.

Each check returns ``(passed, detail)``. Gradient checks run in float64 with a
central-difference step of 1e-5.
"""

from __future__ import annotations

import math
import tempfile
import time
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .dconvlstm import DConvLSTMParams, LSTMState, cell_step
from .deform import deformable_conv2d
from .gradcheck import check_gradients, numerical_grad, relative_error
from .interp import InterpParams, interpolate_pair
from .metrics import psnr, ssim
from .network import ModelConfig, ZoomingModel, charbonnier_loss, forward
from .train import TrainConfig, cosine_lr, load_checkpoint, save_checkpoint

OP_TOL = 1e-4
NETWORK_TOL = 1e-3
STEP = 1e-5

CheckResult = tuple[bool, str]


def _t(arr: np.ndarray, grad: bool = True) -> T.Tensor:
    return T.Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad)


def _weighted_sum(out: T.Tensor, weights: np.ndarray) -> T.Tensor:
    # a random projection exercises every output entry with a distinct weight
    return T.sum(T.mul(out, T.Tensor(weights)))


def _grad_result(errors: dict[str, float], tol: float = OP_TOL) -> CheckResult:
    worst = max(errors.values())
    detail = ", ".join(f"{k}={v:.2e}" for k, v in errors.items())
    return worst < tol, detail


def _randomize(model, rng: np.random.Generator, scale: float = 0.2) -> None:
    """Perturb every parameter so no offset sits exactly on an integer sampling grid."""
    for p in model.parameters():
        p.data = p.data + scale * rng.standard_normal(p.shape)


# --------------------------------------------------------------- gradients
def check_conv2d_grad(rng=None) -> CheckResult:
    rng = np.random.default_rng(1) if rng is None else rng
    x = _t(rng.standard_normal((3, 5, 5)))
    w = _t(rng.standard_normal((2, 3, 3, 3)))
    b = _t(rng.standard_normal(2))
    proj = rng.standard_normal((2, 5, 5))
    return _grad_result(check_gradients(lambda: _weighted_sum(T.conv2d(x, w, b, 1), proj), dict(x=x, w=w, b=b)))


def check_activation_grads(rng=None) -> CheckResult:
    rng = np.random.default_rng(2) if rng is None else rng
    raw = rng.standard_normal((2, 4, 4))
    raw = np.where(np.abs(raw) < 1e-3, 0.5, raw)  # stay clear of the relu kink
    errors = {}
    for name, fn in (
        ("sigmoid", T.sigmoid),
        ("tanh", T.tanh),
        ("relu", T.relu),
        ("leaky_relu", lambda v: T.leaky_relu(v, 0.1)),
    ):
        x = _t(raw.copy())
        proj = rng.standard_normal(raw.shape)
        errors[name] = check_gradients(lambda: _weighted_sum(fn(x), proj), {"x": x})["x"]
    return _grad_result(errors)


def check_pixel_shuffle(rng=None) -> CheckResult:
    rng = np.random.default_rng(3) if rng is None else rng
    for r in (2, 3, 4):
        x = rng.standard_normal((2 * r * r, 3, 3))
        back = T.pixel_unshuffle(T.pixel_shuffle(T.Tensor(x), r), r).data
        if not np.array_equal(back, x):
            return False, f"pixel_unshuffle(pixel_shuffle(x)) != x for r={r}"
    x = _t(rng.standard_normal((8, 3, 3)))
    proj = rng.standard_normal((2, 6, 6))
    return _grad_result(check_gradients(lambda: _weighted_sum(T.pixel_shuffle(x, 2), proj), {"x": x}))


def check_deformable_grad(rng=None) -> CheckResult:
    rng = np.random.default_rng(4) if rng is None else rng
    x = _t(rng.standard_normal((3, 5, 5)))
    w = _t(rng.standard_normal((2, 3, 3, 3)))
    b = _t(rng.standard_normal(2))
    # offsets at least 0.1 away from integers: bilinear sampling has kinks there
    off = np.floor(rng.uniform(-2, 2, (18, 5, 5))) + rng.uniform(0.1, 0.9, (18, 5, 5))
    off = _t(off)
    proj = rng.standard_normal((2, 5, 5))
    return _grad_result(
        check_gradients(lambda: _weighted_sum(deformable_conv2d(x, off, w, b), proj), dict(x=x, offsets=off, w=w, b=b))
    )


def check_zero_offset_equivalence(cases: int = 20, rng=None) -> CheckResult:
    rng = np.random.default_rng(5) if rng is None else rng
    worst = 0.0
    with T.precision(np.float64):
        for i in range(cases):
            k = (1, 3)[i % 2]
            c = (1, 4)[(i // 2) % 2]
            x = T.Tensor(rng.standard_normal((c, 6, 7)))
            w = T.Tensor(rng.standard_normal((3, c, k, k)))
            b = T.Tensor(rng.standard_normal(3))
            zero = T.Tensor(np.zeros((2 * k * k, 6, 7)))
            diff = np.abs(deformable_conv2d(x, zero, w, b).data - T.conv2d(x, w, b, k // 2).data).max()
            worst = max(worst, float(diff))
    return worst <= 1e-6, f"max abs error {worst:.2e} over {cases} cases"


def _random_lstm(rng, c: int = 3) -> DConvLSTMParams:
    with T.precision(np.float64):
        params = DConvLSTMParams(c, aligned=True, rng=rng)
    _randomize(params, rng, 0.3)
    return params


def check_cell_step_grad(rng=None) -> CheckResult:
    rng = np.random.default_rng(6) if rng is None else rng
    params = _random_lstm(rng)
    h = _t(rng.standard_normal((3, 5, 5)))
    c = _t(rng.standard_normal((3, 5, 5)))
    feat = _t(rng.standard_normal((3, 5, 5)))
    ph, pc = rng.standard_normal((2, 3, 5, 5))

    def loss():
        s = cell_step(LSTMState(h, c), feat, params)
        return T.add(_weighted_sum(s.h, ph), _weighted_sum(s.c, pc))

    inputs = dict(h=h, c=c, feat=feat, **dict(params.named_parameters()))
    return _grad_result(check_gradients(loss, inputs, max_entries=6, rng=rng))


def check_interp_grad(rng=None) -> CheckResult:
    rng = np.random.default_rng(7) if rng is None else rng
    with T.precision(np.float64):
        params = InterpParams(3, rng=rng)
    _randomize(params, rng, 0.3)
    f1 = _t(rng.standard_normal((3, 5, 5)))
    f3 = _t(rng.standard_normal((3, 5, 5)))
    proj = rng.standard_normal((3, 5, 5))
    inputs = dict(f1=f1, f3=f3, **dict(params.named_parameters()))
    return _grad_result(
        check_gradients(lambda: _weighted_sum(interpolate_pair(f1, f3, params), proj), inputs, max_entries=6, rng=rng)
    )


def check_charbonnier_grad(rng=None) -> CheckResult:
    rng = np.random.default_rng(8) if rng is None else rng
    pred = [_t(rng.uniform(0, 1, (3, 4, 4))) for _ in range(2)]
    gt = [rng.uniform(0, 1, (3, 4, 4)) for _ in range(2)]
    return _grad_result(check_gradients(lambda: charbonnier_loss(pred, gt), {f"pred{i}": p for i, p in enumerate(pred)}))


def tiny_model_64(rng, ablation: str = "e") -> ZoomingModel:
    with T.precision(np.float64):
        model = ZoomingModel(ModelConfig.from_ablation(ablation, channels=4, k1=1, k2=1, seed=int(rng.integers(1 << 31))))
    _randomize(model, rng, 0.2)
    return model


def check_network_grad(rng=None, n_params: int = 10) -> CheckResult:
    """Charbonnier loss of the full model against finite differences at 10 random parameter entries."""
    rng = np.random.default_rng(9) if rng is None else rng
    model = tiny_model_64(rng)
    lr = rng.uniform(0, 1, (2, 3, 4, 4))
    gt = rng.uniform(0, 1, (3, 3, 16, 16))
    named = list(model.named_parameters())
    model.zero_grad()
    loss_fn = lambda: charbonnier_loss(forward(list(lr), model), list(gt))  # noqa: E731
    loss_fn().backward()
    analytic, numeric, labels = [], [], []
    flat_sizes = np.array([p.data.size for _, p in named])
    picks = rng.choice(flat_sizes.sum(), size=n_params, replace=False)
    offsets = np.cumsum(flat_sizes) - flat_sizes
    for pick in picks:
        j = int(np.searchsorted(offsets, pick, side="right") - 1)
        name, p = named[j]
        idx = int(pick - offsets[j])
        analytic.append(p.grad.reshape(-1)[idx])
        numeric.append(numerical_grad(loss_fn, p, STEP, [idx])[0])
        labels.append(name)
    errors = [relative_error([a], [n]) for a, n in zip(analytic, numeric)]
    worst = int(np.argmax(errors))
    return max(errors) < NETWORK_TOL, f"worst {errors[worst]:.2e} at {labels[worst]}"


# ---------------------------------------------------------------- anchors
def check_closed_form_convlstm() -> CheckResult:
    with T.precision(np.float64):
        params = DConvLSTMParams(2, aligned=True, rng=0)
    for p in (params.gates.weight, params.gates.bias):
        p.data[...] = 0.0
    prev_c = np.random.default_rng(10).uniform(-2, 2, (2, 4, 4))
    prev = LSTMState(T.Tensor(np.zeros((2, 4, 4))), T.Tensor(prev_c))
    state = cell_step(prev, T.Tensor(np.random.default_rng(11).standard_normal((2, 4, 4))), params)
    err = float(np.abs(state.h.data - 0.5 * np.tanh(0.5 * prev_c)).max())
    return err < 1e-9, f"max error {err:.2e}"


def check_arity() -> CheckResult:
    model = ZoomingModel(ModelConfig.desk(channels=4, k1=1, k2=1))
    rng = np.random.default_rng(12)
    for n_in, n_out in ((2, 3), (4, 7)):
        out = forward(list(rng.uniform(0, 1, (n_in, 3, 6, 5)).astype(np.float32)), model)
        if len(out) != n_out or any(o.shape != (3, 24, 20) for o in out):
            return False, f"{n_in} frames -> {len(out)} frames of {out[0].shape}"
    return True, "2->3 and 4->7 frames at x4"


def check_loss_anchors() -> CheckResult:
    x = [T.Tensor(np.random.default_rng(13).uniform(0, 1, (3, 8, 8)).astype(np.float32))]
    value = charbonnier_loss(x, x).item()
    cfg = TrainConfig(total_steps=100)
    ok = value == 1e-3 and cosine_lr(0, cfg) == 4e-4 and cosine_lr(100, cfg) == 1e-7
    return ok, f"charbonnier(x, x)={value!r}, lr endpoints {cosine_lr(0, cfg)!r}/{cosine_lr(100, cfg)!r}"


def check_metric_anchors() -> CheckResult:
    a = np.full((3, 16, 16), 0.25)
    b = a + 0.5
    rng = np.random.default_rng(14)
    u, v = rng.uniform(0, 1, (2, 3, 16, 16))
    p = psnr(a, b)
    ok = abs(p - 20 * math.log10(2)) < 1e-4 and ssim(u, u) == 1.0 and abs(ssim(u, v) - ssim(v, u)) < 1e-12
    return ok, f"psnr={p:.6f}"


def check_checkpoint_roundtrip() -> CheckResult:
    model = ZoomingModel(ModelConfig.desk(channels=4, k1=1, k2=1, seed=3))
    lr = list(np.random.default_rng(15).uniform(0, 1, (2, 3, 4, 4)).astype(np.float32))
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "model.ckpt"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
    same = all(np.array_equal(a.data, b.data) for a, b in zip(model.parameters(), loaded.parameters()))
    outputs = all(np.array_equal(a.data, b.data) for a, b in zip(forward(lr, model), forward(lr, loaded)))
    return same and outputs, "parameters and outputs bitwise equal" if same and outputs else "mismatch"


GRADIENT_CHECKS: dict[str, Callable[[], CheckResult]] = {
    "conv2d gradient": check_conv2d_grad,
    "activation gradients": check_activation_grads,
    "pixel_shuffle bijection + gradient": check_pixel_shuffle,
    "deformable_conv2d gradient (incl. offsets)": check_deformable_grad,
    "cell_step gradient": check_cell_step_grad,
    "interpolate_pair gradient": check_interp_grad,
    "charbonnier_loss gradient": check_charbonnier_grad,
    "full network gradient": check_network_grad,
}

CHECKS: dict[str, Callable[[], CheckResult]] = {
    **GRADIENT_CHECKS,
    "zero-offset equivalence": check_zero_offset_equivalence,
    "closed-form ConvLSTM step": check_closed_form_convlstm,
    "arity laws": check_arity,
    "loss and lr anchors": check_loss_anchors,
    "metric anchors": check_metric_anchors,
    "checkpoint round trip": check_checkpoint_roundtrip,
}


def run_checks(checks: dict[str, Callable[[], CheckResult]] = CHECKS, echo=print) -> bool:
    all_ok = True
    for name, fn in checks.items():
        start = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        all_ok &= ok
        echo(f"{'PASS' if ok else 'FAIL'}  {name}  ({detail}; {time.perf_counter() - start:.1f}s)")
    return all_ok
