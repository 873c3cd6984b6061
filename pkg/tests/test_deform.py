import numpy as np
import pytest

from stvsr import tensor as T
from stvsr.deform import OffsetPredictor, deformable_conv2d, make_offset_predictor, tap_positions
from stvsr.gradcheck import check_gradients
from stvsr.train import AdamState, adam_step

from helpers import loop_deform, t64


def test_tap_positions_row_major():
    ry, rx = tap_positions(3)
    assert list(zip(ry, rx))[:4] == [(-1, -1), (-1, 0), (-1, 1), (0, -1)]


@pytest.mark.parametrize("k", [1, 3])
@pytest.mark.parametrize("c", [1, 4])
def test_zero_offsets_reduce_to_conv2d(k, c, rng):
    for _ in range(5):
        x = T.Tensor(rng.standard_normal((c, 6, 5)))
        w = T.Tensor(rng.standard_normal((2, c, k, k)))
        b = T.Tensor(rng.standard_normal(2))
        zero = T.Tensor(np.zeros((2 * k * k, 6, 5)))
        diff = np.abs(deformable_conv2d(x, zero, w, b).data - T.conv2d(x, w, b, k // 2).data)
        assert diff.max() <= 1e-6


def test_unit_column_offset_shifts_left(rng):
    x = rng.standard_normal((1, 4, 5))
    off = np.zeros((2, 4, 5))
    off[1] = 1.0
    out = deformable_conv2d(T.Tensor(x), T.Tensor(off), T.Tensor(np.ones((1, 1, 1, 1))), T.Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data[0, :, :-1], x[0, :, 1:])
    np.testing.assert_array_equal(out.data[0, :, -1], 0.0)


@pytest.mark.parametrize("dy,dx", [(1, 0), (-1, 2), (0, -1)])
def test_uniform_integer_offset_is_translation_of_conv(dy, dx, rng):
    x = rng.standard_normal((2, 6, 6))
    w = rng.standard_normal((3, 2, 3, 3))
    off = np.zeros((18, 6, 6))
    off[0::2] = dy
    off[1::2] = dx
    got = deformable_conv2d(T.Tensor(x), T.Tensor(off), T.Tensor(w)).data
    plain = T.conv2d(T.Tensor(x), T.Tensor(w), None, 1).data
    # out(y, x) == conv(y + dy, x + dx) wherever the shifted position is on the grid
    ys = slice(max(0, -dy), min(6, 6 - dy))
    xs = slice(max(0, -dx), min(6, 6 - dx))
    np.testing.assert_allclose(
        got[:, ys, xs], plain[:, ys.start + dy : ys.stop + dy, xs.start + dx : xs.stop + dx], atol=1e-12
    )


def test_matches_loop_oracle_on_random_offsets(rng):
    x = rng.standard_normal((2, 5, 4))
    off = rng.uniform(-2.5, 2.5, (18, 5, 4))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    got = deformable_conv2d(T.Tensor(x), T.Tensor(off), T.Tensor(w), T.Tensor(b)).data
    np.testing.assert_allclose(got, loop_deform(x, off, w, b), atol=1e-12)


def test_batched_equals_per_sample(rng):
    x = rng.standard_normal((2, 3, 5, 5))
    off = rng.uniform(-1, 1, (2, 18, 5, 5))
    w = T.Tensor(rng.standard_normal((2, 3, 3, 3)))
    batched = deformable_conv2d(T.Tensor(x), T.Tensor(off), w).data
    for i in range(2):
        single = deformable_conv2d(T.Tensor(x[i]), T.Tensor(off[i]), w).data
        np.testing.assert_allclose(batched[i], single, atol=1e-12)


def test_gradients_away_from_integer_offsets(rng):
    x = t64(rng.standard_normal((2, 5, 5)))
    w = t64(rng.standard_normal((2, 2, 3, 3)))
    b = t64(rng.standard_normal(2))
    base = np.floor(rng.uniform(-2, 2, (18, 5, 5)))
    off = t64(base + rng.uniform(0.1, 0.9, base.shape))
    errors = check_gradients(lambda: T.sum(deformable_conv2d(x, off, w, b)), dict(x=x, offsets=off, w=w, b=b))
    assert max(errors.values()) < 1e-4, errors


def test_offset_channel_mismatch():
    x = T.Tensor(np.zeros((1, 4, 4)))
    with pytest.raises(T.ContractError, match="K=3"):
        deformable_conv2d(x, T.Tensor(np.zeros((8, 4, 4))), T.Tensor(np.zeros((1, 1, 3, 3))))


def test_fresh_predictor_outputs_zero_offsets(rng):
    pred = make_offset_predictor(8, 3, rng=rng)
    out = pred(T.Tensor(rng.standard_normal((8, 6, 6))))
    assert out.shape == (18, 6, 6)
    assert not out.data.any()


def test_predictor_width_defaults_to_input_channels():
    pred = OffsetPredictor(6, 1)
    assert pred.conv1.weight.shape == (6, 6, 3, 3)
    assert pred.conv2.weight.shape == (2, 6, 3, 3)


def test_one_adam_step_learns_positive_column_shift(f64):
    rng = np.random.default_rng(7)
    x = T.Tensor(rng.uniform(0, 1, (1, 8, 8)))
    # the target is the input moved one column left, i.e. what offset dx=+1 would produce
    target = np.zeros((1, 8, 8))
    target[..., :-1] = x.data[..., 1:]
    pred = OffsetPredictor(1, 1, rng=rng)
    weight = T.Tensor(np.ones((1, 1, 1, 1)))

    def loss():
        diff = T.sub(deformable_conv2d(x, pred(x), weight), T.Tensor(target))
        return T.mean(T.mul(diff, diff))

    params = pred.parameters()
    loss().backward()
    adam_step(params, [p.grad for p in params], AdamState(), lr=1e-2)
    dx = pred(x).data[1]
    assert dx.mean() > 0
