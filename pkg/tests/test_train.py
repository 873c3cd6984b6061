import math
import struct

import numpy as np
import pytest

from stvsr import tensor as T
from stvsr.config import ConfigError, load_config, parse_config
from stvsr.data import synthesize_toy_clip
from stvsr.network import ModelConfig, ZoomingModel, forward
from stvsr.train import (
    AdamState,
    CheckpointError,
    NonFiniteLossError,
    TrainConfig,
    adam_step,
    config_from_state,
    cosine_lr,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
    train_loop,
    write_loss_log,
)

TINY = ModelConfig(channels=4, k1=1, k2=1)


# ------------------------------------------------------------ schedule
def test_cosine_endpoints_exact():
    cfg = TrainConfig(total_steps=1000)
    assert cosine_lr(0, cfg) == 4e-4
    assert cosine_lr(1000, cfg) == 1e-7


def test_cosine_midpoint():
    cfg = TrainConfig(total_steps=1000)
    assert abs(cosine_lr(500, cfg) - (4e-4 + 1e-7) / 2) < 1e-18


def test_cosine_formula():
    cfg = TrainConfig(total_steps=37)
    for step in range(1, 37):
        want = 1e-7 + 0.5 * (4e-4 - 1e-7) * (1 + math.cos(math.pi * step / 37))
        assert abs(cosine_lr(step, cfg) - want) < 1e-18


def test_cosine_monotone():
    cfg = TrainConfig(total_steps=250)
    lrs = [cosine_lr(s, cfg) for s in range(251)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_cosine_out_of_range():
    cfg = TrainConfig(total_steps=10)
    for step in (-1, 11):
        with pytest.raises(T.ContractError):
            cosine_lr(step, cfg)


def test_train_config_invariants():
    with pytest.raises(T.ContractError):
        TrainConfig(lr_min=1e-3, lr_max=1e-4)
    with pytest.raises(T.ContractError):
        TrainConfig(total_steps=0)


# ---------------------------------------------------------------- Adam
def scalar(value):
    return T.Tensor(np.array([value], dtype=np.float64))


def test_zero_gradient_leaves_everything_at_zero():
    p = T.Tensor(np.array([1.5, -2.0]))
    state = AdamState()
    adam_step([p], [np.zeros(2)], state, lr=1e-2)
    np.testing.assert_array_equal(p.data, [1.5, -2.0])
    assert not state.m[0].any() and not state.v[0].any() and state.t == 1


@pytest.mark.parametrize("g", [3.0, -0.02, 1e-3])
def test_first_step_is_lr_times_sign(g):
    p = scalar(0.0)
    lr, eps = 1e-3, 1e-8
    adam_step([p], [np.array([g])], AdamState(), lr=lr, eps=eps)
    # after bias correction m_hat = g and sqrt(v_hat) = |g|
    assert abs(p.data[0] + lr * g / (abs(g) + eps)) < 1e-9
    assert abs(p.data[0] + lr * math.copysign(1, g)) < 1e-6


def test_five_step_quadratic_matches_scalar_oracle():
    p = scalar(1.0)
    state = AdamState()
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    x, m, v = 1.0, 0.0, 0.0
    for t in range(1, 6):
        g = 2 * x
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        adam_step([p], [2 * p.data], state, lr=lr)
        assert abs(p.data[0] - x) < 1e-12
    assert state.t == 5


def test_zero_lr_keeps_parameters(rng):
    p = T.Tensor(rng.standard_normal((3, 3)))
    before = p.data.copy()
    state = AdamState()
    for _ in range(3):
        adam_step([p], [rng.standard_normal((3, 3))], state, lr=0.0)
    np.testing.assert_array_equal(p.data, before)
    assert (state.v[0] >= 0).all()


def test_missing_gradient():
    with pytest.raises(T.ContractError):
        adam_step([scalar(1.0)], [None], AdamState(), lr=1e-3)
    with pytest.raises(T.ContractError):
        adam_step([scalar(1.0)], [], AdamState(), lr=1e-3)


# ------------------------------------------------------------ training
@pytest.fixture(scope="module")
def clip():
    return synthesize_toy_clip("shift", 16, rng=0)


def test_loss_falls_on_single_sample(clip):
    cfg = TrainConfig(total_steps=201, batch_size=1, patch=4, augment=False)
    log = train_loop(ZoomingModel(TINY), [clip], cfg).log
    assert log[200][2] < log[0][2]


def test_training_is_deterministic(clip):
    cfg = TrainConfig(total_steps=6, batch_size=2, patch=2)
    a = train_loop(ZoomingModel(TINY), [clip, clip[::-1].copy()], cfg)
    b = train_loop(ZoomingModel(TINY), [clip, clip[::-1].copy()], cfg)
    assert a.log == b.log
    for (_, p), (_, q) in zip(a.model.named_parameters(), b.model.named_parameters()):
        np.testing.assert_array_equal(p.data, q.data)


def test_logged_lr_follows_schedule(clip):
    cfg = TrainConfig(total_steps=5, batch_size=1, patch=2)
    seen = []
    log = train_loop(ZoomingModel(TINY), [clip], cfg, on_step=lambda *row: seen.append(row)).log
    assert [row[1] for row in log] == [cosine_lr(s, cfg) for s in range(5)]
    assert seen == log


def test_non_finite_loss_aborts(clip):
    model = ZoomingModel(TINY)
    model.reconstructor.conv_last.bias.data[0] = np.nan
    with pytest.raises(NonFiniteLossError) as info:
        train_loop(model, [clip], TrainConfig(total_steps=3, batch_size=1, patch=2))
    assert info.value.step == 0 and info.value.lr == 4e-4


def test_empty_dataset():
    with pytest.raises(T.ContractError):
        train_loop(ZoomingModel(TINY), [], TrainConfig(total_steps=1))


def test_loss_log_format(tmp_path):
    path = tmp_path / "loss.log"
    write_loss_log([(0, 4e-4, 0.25), (1, 3e-4, 0.125)], path)
    lines = path.read_text().splitlines()
    assert lines == ["0\t0.0004\t0.25", "1\t0.0003\t0.125"]


# --------------------------------------------------------- checkpoints
@pytest.fixture
def perturbed(rng):
    model = ZoomingModel(ModelConfig.desk())
    for p in model.parameters():
        p.data = p.data + np.float32(0.01) * rng.standard_normal(p.shape).astype(np.float32)
    return model


def test_round_trip_is_bitwise(tmp_path, perturbed):
    path = tmp_path / "m.zslm"
    save_checkpoint(perturbed, path)
    loaded = load_checkpoint(path)
    assert loaded.config == ModelConfig.desk()
    original = dict(perturbed.named_parameters())
    for name, p in loaded.named_parameters():
        assert p.data.tobytes() == original[name].data.tobytes(), name


def test_reloaded_forward_is_bitwise_identical(tmp_path, perturbed, rng):
    path = tmp_path / "m.zslm"
    save_checkpoint(perturbed, path)
    loaded = load_checkpoint(path)
    frames = [T.Tensor(rng.uniform(0, 1, (3, 8, 8)).astype(np.float32)) for _ in range(4)]
    for a, b in zip(forward(frames, perturbed), forward(frames, loaded)):
        assert a.data.tobytes() == b.data.tobytes()


def test_header_layout(tmp_path):
    path = tmp_path / "m.zslm"
    model = ZoomingModel(TINY)
    save_checkpoint(model, path)
    raw = path.read_bytes()
    assert raw[:4] == b"ZSLM"
    version, count = struct.unpack("<II", raw[4:12])
    assert version == 1 and count == len(model.parameters())
    (name_len,) = struct.unpack("<I", raw[12:16])
    assert raw[16 : 16 + name_len] == b"extractor.conv_first.weight"


@pytest.mark.parametrize("letter", "abcde")
def test_config_inferred_from_names(letter):
    cfg = ModelConfig(channels=4, k1=2, k2=3).with_ablation(letter)
    assert config_from_state(ZoomingModel(cfg).state_dict()) == cfg


def test_corrupt_magic(tmp_path):
    path = tmp_path / "m.zslm"
    save_checkpoint(ZoomingModel(TINY), path)
    raw = bytearray(path.read_bytes())
    raw[0:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_bad_version(tmp_path):
    path = tmp_path / "m.zslm"
    save_checkpoint(ZoomingModel(TINY), path)
    raw = bytearray(path.read_bytes())
    raw[4:8] = struct.pack("<I", 7)
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        read_checkpoint(path)


def test_truncation_reports_position(tmp_path):
    path = tmp_path / "m.zslm"
    save_checkpoint(ZoomingModel(TINY), path)
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(CheckpointError, match="truncated .* at byte"):
        read_checkpoint(path)


def test_trailing_bytes(tmp_path):
    path = tmp_path / "m.zslm"
    save_checkpoint(ZoomingModel(TINY), path)
    path.write_bytes(path.read_bytes() + b"\0")
    with pytest.raises(CheckpointError, match="trailing"):
        read_checkpoint(path)


def test_load_into_mismatched_model(tmp_path):
    path = tmp_path / "m.zslm"
    save_checkpoint(ZoomingModel(TINY), path)
    with pytest.raises(CheckpointError):
        load_checkpoint(path, ZoomingModel(ModelConfig.desk()))


# -------------------------------------------------------------- config
def test_parse_config():
    model, train = parse_config(
        """
        # desk run
        channels = 8
        k2 = 2            # shallow
        temporal = convlstm
        bidirectional = no
        lr_max = 1e-3
        total_steps = 50
        augment = false
        init_seed = 3
        """
    )
    assert model == ModelConfig(channels=8, k1=2, k2=2, temporal="convlstm", bidirectional=False, seed=3)
    assert train == TrainConfig(lr_max=1e-3, total_steps=50, augment=False)


def test_empty_config_gives_desk_defaults():
    assert parse_config("") == (ModelConfig.desk(), TrainConfig())


@pytest.mark.parametrize("text", ["colour = red", "channels = many", "augment = maybe", "just words", "scale = 2"])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "none.cfg")
