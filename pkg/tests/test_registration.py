import numpy as np
import pytest

from deformreg.errors import ConfigError, DivergenceError, ShapeError
from deformreg.field import warp
from deformreg.optim import AdamState
from deformreg.registration import (
    RegistrationConfig,
    RegistrationReport,
    _schedule,
    alternating_schedule,
    final_smoothness,
    pyramid_downsample,
    register,
    smooth_gradient,
    t_step,
)
from deformreg.similarity import LossConfig
from deformreg.synth import ModalityRemapSpec, SyntheticDeformSpec, make_pair, make_phantom
from deformreg.translator import identity_lut


@pytest.fixture(scope="module")
def phantom16():
    return np.asarray(make_phantom((16, 16, 16), seed=1)[0])


@pytest.fixture(scope="module")
def pair16():
    return make_pair((16, 16, 16), SyntheticDeformSpec(shift=(1.5,) * 3, rotation_deg=(2.0,) * 3,
                                                        elastic_amplitude=0.5, seed=3),
                     ModalityRemapSpec(noise_sigma=0.02, seed=3), seed=3)


def test_pyramid_of_ramp_matches_hand_average():
    a = np.indices((8, 8, 8)).sum(axis=0).astype(float)
    out = pyramid_downsample(a, 2)
    # each 2-cube holds x+y+z for x,y,z in {2i, 2i+1}: mean is 2(i+j+k) + 1.5
    i, j, k = np.indices((4, 4, 4))
    assert np.allclose(out, 2.0 * (i + j + k) + 1.5)


def test_pyramid_edge_cases(rng):
    a = rng.random((9, 10, 11))
    assert np.array_equal(pyramid_downsample(a, 1), a)
    assert pyramid_downsample(a, 2).shape == (4, 5, 5)
    assert np.allclose(pyramid_downsample(np.full((8, 8, 8), 0.3), 2), 0.3)
    out = pyramid_downsample(a, 2)
    assert a.min() <= out.min() and out.max() <= a.max()
    with pytest.raises(ConfigError):
        pyramid_downsample(a, 4)


def test_config_validation():
    with pytest.raises(ConfigError):
        RegistrationConfig(levels=(2, 4, 1))
    with pytest.raises(ConfigError):
        RegistrationConfig(levels=(4, 2))
    with pytest.raises(ConfigError):
        RegistrationConfig(iterations=0)
    with pytest.raises(ConfigError):
        RegistrationConfig(mode="gan")
    with pytest.raises(ConfigError):
        RegistrationConfig.from_dict({"unknown": 1})


def test_config_dict_round_trip():
    cfg = RegistrationConfig(levels=(2, 1), loss=LossConfig(alpha=0.5), mode="full_alternating")
    assert RegistrationConfig.from_dict(cfg.to_dict()) == cfg
    assert RegistrationConfig.from_dict({"loss": {"lambda": 3.0}}).loss.lam == 3.0


def test_smooth_gradient_is_psd(rng):
    g = rng.standard_normal((3, 9, 9, 9))
    s = smooth_gradient(g, 2.0)
    assert np.sum(g * s) > 0
    assert np.allclose(smooth_gradient(np.ones((3, 9, 9, 9)), 2.0)[:, 4, 4, 4], 1.0)


def test_t_step_zero_lr_keeps_field(phantom16):
    u = np.full((3, 16, 16, 16), 0.2)
    new, _, loss = t_step(phantom16, phantom16, u, None, LossConfig(), AdamState(lr=0.0))
    assert np.array_equal(new, u) and np.isfinite(loss.total)


def test_t_step_descends_on_shifted_pair(phantom16):
    flo = np.roll(phantom16, 1, axis=0)
    cfg = LossConfig(lg_window=3)
    u0 = np.zeros((3, 16, 16, 16))
    u1, _, before = t_step(phantom16, flo, u0, None, cfg, AdamState(lr=0.05, max_step=0.05), grad_sigma=2.0)
    _, _, after = t_step(phantom16, flo, u1, None, cfg, AdamState(lr=0.0))
    assert after.total < before.total


def test_t_step_divergence_carries_state(phantom16):
    bad = phantom16.copy()
    bad[0, 0, 0] = np.nan
    u = np.zeros((3, 16, 16, 16))
    with pytest.raises(DivergenceError) as exc:
        t_step(phantom16, bad, u, None, LossConfig(), AdamState())
    assert np.array_equal(exc.value.state["field"], u)


def test_register_shape_mismatch():
    with pytest.raises(ShapeError):
        register(np.zeros((16, 16, 16)), np.zeros((16, 16, 17)))


def test_alternating_bookkeeping(phantom16):
    cfg = RegistrationConfig(levels=(1,), iterations=10, mode="full_alternating", translator_kind="lut",
                             warmup_fraction=0.3)
    flo = 1.0 - phantom16
    _, translator, report = alternating_schedule(phantom16, flo, cfg)
    assert report.n_iterations == 10 and len(report.translator) == 10
    assert report.warmup_iterations == 3
    assert report.lcc[:3] == [0.0, 0.0, 0.0] and all(v > 0 for v in report.lcc[3:])
    assert translator is not None


def test_t_steps_per_g_step(phantom16):
    cfg = RegistrationConfig(levels=(1,), iterations=12, mode="full_alternating", translator_kind="lut",
                             t_steps_per_g_step=3)
    _, _, report = alternating_schedule(phantom16, phantom16, cfg)
    assert [r["iteration"] for r in report.translator] == [2, 5, 8, 11]


def test_alternating_schedule_rejects_lg_only(phantom16):
    with pytest.raises(ConfigError):
        alternating_schedule(phantom16, phantom16, RegistrationConfig())


def test_report_traces_are_complete(pair16):
    cfg = RegistrationConfig(levels=(2, 1), iterations=15, mode="full_alternating", translator_kind="lut")
    result = register(pair16.ref, pair16.flo, cfg)
    rep = result.report
    assert rep.n_iterations == 30
    for trace in (rep.total, rep.lg, rep.lcc, rep.smooth, rep.level):
        assert len(trace) == 30
    assert all(np.isfinite(rep.total))
    assert len(rep.trace_rows()) == 30 and "register" in rep.runtime_seconds
    assert len(rep.level_start_loss) == len(rep.level_end_loss) == 2


def test_self_registration_stays_put(phantom16):
    cfg = RegistrationConfig(levels=(2, 1), iterations=40)
    u, _, _ = register(phantom16, phantom16, cfg)
    u = np.asarray(u)
    assert np.mean(np.linalg.norm(u, axis=0)) < 0.1
    assert np.sqrt(np.mean((warp(phantom16, u) - phantom16) ** 2)) < 1e-3


def test_pyramid_hand_off_is_continuous(pair16):
    cfg = RegistrationConfig(levels=(2, 1), iterations=40, grad_sigma=2.0)
    rep = register(pair16.ref, pair16.flo, cfg).report
    start, end = rep.level_start_loss[1], rep.level_end_loss[0]
    assert abs(start - end) <= 0.1 * abs(end)


def test_register_is_deterministic(pair16):
    cfg = RegistrationConfig(levels=(2, 1), iterations=10, mode="full_alternating")
    a = register(pair16.ref, pair16.flo, cfg)
    b = register(pair16.ref, pair16.flo, cfg)
    assert np.array_equal(np.asarray(a.field), np.asarray(b.field))
    assert a.report.total == b.report.total


def test_constant_shift_is_recovered():
    # the floating image samples the reference at p - 3 along x, so u = (3, 0, 0)
    vol = np.asarray(make_phantom((32, 32, 32), seed=0)[0])
    shifted = np.zeros((3, 32, 32, 32))
    shifted[0] = -3.0
    flo = warp(vol, shifted)
    u = np.asarray(register(vol, flo, RegistrationConfig()).field)
    core = (slice(None), slice(10, 22), slice(10, 22), slice(10, 22))
    mean = u[core].reshape(3, -1).mean(axis=1)
    assert np.allclose(mean, (3.0, 0.0, 0.0), atol=0.5)


def test_final_smoothness_matches_field(phantom16):
    res = register(phantom16, np.roll(phantom16, 1, axis=1), RegistrationConfig(levels=(1,), iterations=5))
    assert final_smoothness(res) >= 0.0
    assert isinstance(res.report, RegistrationReport)


def test_schedule_ramp_then_cosine():
    lrs = [_schedule(0.2, 0.1, 0.1, i, 100) for i in range(100)]
    assert lrs[0] == pytest.approx(0.2 * 0.1 * (0.1 + 0.9 * 1.0))
    assert lrs[9] == pytest.approx(0.2 * (0.1 + 0.9 * 0.5 * (1 + np.cos(np.pi * 9 / 99))))
    assert lrs[-1] == pytest.approx(0.02)
    assert np.all(np.diff(lrs[:10]) > 0) and np.all(np.diff(lrs[10:]) < 0)
    assert _schedule(0.2, 0.1, 0.0, 0, 100) == pytest.approx(0.2)


def test_ramp_fraction_validation():
    with pytest.raises(ConfigError):
        RegistrationConfig(lr_ramp_fraction=1.0)


def test_callback_sees_every_translator_update():
    ref = np.random.default_rng(0).random((8, 8, 8))
    seen = []
    cfg = RegistrationConfig(levels=(2, 1), iterations=4, mode="full_alternating")
    res = register(ref, ref, cfg, callback=lambda lvl, it, u, t: seen.append((lvl, it, u.shape)))
    assert [(lvl, it) for lvl, it, _ in seen] == [(r["level"], r["iteration"]) for r in res.report.translator]
    assert seen[0][2] == (3, 4, 4, 4) and seen[-1][2] == (3, 8, 8, 8)
