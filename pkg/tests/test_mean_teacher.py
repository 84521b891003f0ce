import numpy as np
import pytest

from milpool.frame_model import ModelConfig, ModelParams, init_params
from milpool.losses import FrameTargets
from milpool.mean_teacher import NoiseConfig, TeacherState, apply_noise, draw_shift, ema_update
from milpool.numerics import RngStream


def small_params(seed=0):
    return init_params(ModelConfig(input_dim=3, num_classes=2, hidden_dims=(4,), context_radius=1, seed=seed))


def test_noise_config_rejects_negative():
    with pytest.raises(ValueError):
        NoiseConfig(shift_std_frames=-1)
    with pytest.raises(ValueError):
        NoiseConfig(gaussian_std=-0.1)


def test_zero_noise_is_identity():
    x = np.arange(24, dtype=float).reshape(8, 3)
    lab = FrameTargets.strong(np.eye(8, 2))
    out, lab2 = apply_noise(x, lab, NoiseConfig(0.0, 0.0), RngStream(0, "t"))
    assert np.array_equal(out, x)
    assert np.array_equal(lab2.t_frame, lab.t_frame)


def test_shift_moves_labels_with_features():
    T = 12
    x = np.zeros((T, 2))
    x[3:6, 0] = 1.0
    t = np.zeros((T, 1))
    t[3:6, 0] = 1.0
    out, lab = apply_noise(x, FrameTargets.strong(t), NoiseConfig(5.0, 0.0), RngStream(0, "t"), shift=2)
    assert np.flatnonzero(out[:, 0]).tolist() == [5, 6, 7]
    assert np.flatnonzero(lab.t_frame[:, 0]).tolist() == [5, 6, 7]


def test_shift_is_circular():
    x = np.arange(5, dtype=float)[:, None]
    out, _ = apply_noise(x, None, NoiseConfig(1.0, 0.0), RngStream(0, "t"), shift=-2)
    assert out[:, 0].tolist() == [2, 3, 4, 0, 1]


def test_weak_labels_not_shifted():
    lab = FrameTargets.weak(np.array([1.0, 0.0]))
    _, out = apply_noise(np.zeros((6, 2)), lab, NoiseConfig(1.0, 0.0), RngStream(0, "t"), shift=3)
    assert out is lab


def test_shift_std_matches_configuration():
    cfg = NoiseConfig(16.0, 0.0)
    rng = RngStream(11, "shift-dist")
    shifts = np.array([draw_shift(cfg, rng) for _ in range(10_000)], dtype=float)
    assert abs(shifts.std() / 16.0 - 1.0) < 0.05
    assert np.all(shifts == np.rint(shifts))


def test_gaussian_noise_scale():
    x = np.zeros((400, 50))
    out, _ = apply_noise(x, None, NoiseConfig(0.0, 0.1), RngStream(2, "g"))
    assert abs(out.std() - 0.1) < 0.005


def test_noise_reproducible():
    x = np.ones((10, 3))
    a, _ = apply_noise(x, None, NoiseConfig(), RngStream(4, "r"))
    b, _ = apply_noise(x, None, NoiseConfig(), RngStream(4, "r"))
    assert np.array_equal(a, b)


def test_ema_single_step_example():
    p = small_params()
    zero = ModelParams(p.config, {k: np.zeros_like(v) for k, v in p.arrays.items()}, p.pooling_template)
    one = ModelParams(p.config, {k: np.ones_like(v) for k, v in p.arrays.items()}, p.pooling_template)
    out = ema_update(TeacherState(zero, 0.999), one)
    for v in out.params.arrays.values():
        assert np.allclose(v, 0.001, rtol=0, atol=1e-15)


def test_ema_zero_decay_copies_student():
    s, t = small_params(0), small_params(1)
    out = ema_update(TeacherState(t, 0.0), s)
    for k in s.arrays:
        assert np.array_equal(out.params.arrays[k], s.arrays[k])


def test_ema_closed_form_after_100_steps():
    s, t0 = small_params(0), small_params(1)
    d = 0.97
    state = TeacherState(t0, d)
    for _ in range(100):
        state = ema_update(state, s)
    for k in s.arrays:
        w, th0 = s.arrays[k], t0.arrays[k]
        expect = w - (w - th0) * d**100
        assert np.max(np.abs(state.params.arrays[k] - expect)) < 1e-10


def test_ema_includes_pooling_parameters():
    cfg = ModelConfig(input_dim=2, num_classes=2, hidden_dims=(3,), pooling="power", n_init=1.0)
    s = init_params(cfg)
    t = init_params(ModelConfig(input_dim=2, num_classes=2, hidden_dims=(3,), pooling="power", n_init=2.0))
    out = ema_update(TeacherState(t, 0.5), s)
    assert np.allclose(out.params.arrays["pool.n"], 1.5)


def test_ema_exclude_copies():
    s, t = small_params(0), small_params(1)
    key = next(iter(s.arrays))
    out = ema_update(TeacherState(t, 0.9), s, exclude=(key,))
    assert np.array_equal(out.params.arrays[key], s.arrays[key])


def test_ema_does_not_mutate_inputs():
    s, t = small_params(0), small_params(1)
    before = t.flat().copy()
    ema_update(TeacherState(t, 0.9), s)
    assert np.array_equal(t.flat(), before)


def test_ema_shape_mismatch():
    s = small_params()
    other = init_params(ModelConfig(input_dim=3, num_classes=2, hidden_dims=(5,), context_radius=1))
    with pytest.raises(ValueError):
        ema_update(TeacherState(other, 0.9), s)


def test_decay_range():
    with pytest.raises(ValueError):
        TeacherState(small_params(), 1.0)
