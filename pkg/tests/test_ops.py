import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deformreg import _ops


def _adjoint_gap(fwd, adj, shape, rng):
    a = rng.standard_normal(shape)
    g = rng.standard_normal(shape)
    return abs(np.sum(fwd(a) * g) - np.sum(a * adj(g)))


@pytest.mark.parametrize("axis", [0, 1, 2])
def test_central_diff_adjoint(axis, rng):
    gap = _adjoint_gap(
        lambda a: _ops.central_diff(a, axis), lambda g: _ops.central_diff_adjoint(g, axis), (5, 6, 7), rng
    )
    assert gap < 1e-10


@pytest.mark.parametrize("axis", [0, 1, 2])
def test_forward_diff_adjoint(axis, rng):
    gap = _adjoint_gap(
        lambda a: _ops.forward_diff(a, axis), lambda g: _ops.forward_diff_adjoint(g, axis), (5, 6, 7), rng
    )
    assert gap < 1e-10


@pytest.mark.parametrize("width", [1, 3, 5, 7])
def test_box_sum_self_adjoint(width, rng):
    gap = _adjoint_gap(lambda a: _ops.box_sum(a, width), lambda g: _ops.box_sum(g, width), (6, 7, 8), rng)
    assert gap < 1e-9


def test_box_sum_matches_loop(rng):
    a = rng.standard_normal((6, 5, 7))
    out = _ops.box_sum(a, 3)
    for p in [(0, 0, 0), (5, 4, 6), (2, 3, 1), (3, 2, 5)]:
        lo = [max(0, c - 1) for c in p]
        hi = [c + 2 for c in p]
        assert out[p] == pytest.approx(a[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]].sum(), abs=1e-12)


def test_box_sum_rejects_even_width():
    with pytest.raises(ValueError):
        _ops.box_sum(np.zeros((4, 4, 4)), 4)


def test_box_count_and_mean_of_constant():
    count = _ops.box_count((5, 5, 5), 3)
    assert count[2, 2, 2] == 27 and count[0, 0, 0] == 8 and count[0, 2, 4] == 12
    assert np.allclose(_ops.box_mean(np.full((5, 5, 5), 0.3), 5), 0.3)


def test_central_diff_of_linear_ramp_is_exact():
    a = np.indices((5, 6, 7))[1] * 0.5
    assert np.allclose(_ops.central_diff(a, 1), 0.5)
    assert np.allclose(_ops.central_diff(a, 0), 0.0)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.5, 4.0))
def test_blur_preserves_constants_and_mean_range(sigma):
    a = np.full((10, 10, 10), 0.7)
    assert np.allclose(_ops.gaussian_like_blur(a, sigma), 0.7)


def test_blur_variance_of_impulse():
    # sigma 3 gives width 7, and three width-7 passes have variance 3 * 48 / 12
    a = np.zeros((41, 3, 3))
    a[20, 1, 1] = 1.0
    out = _ops.gaussian_like_blur(a, 3.0)[:, 1, 1]
    x = np.arange(41) - 20
    var = np.sum(out * x * x) / np.sum(out)
    assert var == pytest.approx(12.0, rel=1e-9)
