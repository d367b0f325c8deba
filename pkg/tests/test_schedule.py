import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smm.autodiff import Tensor, backward, sum_squares
from smm.schedule import (
    NonZeroMean,
    SpatialDiffusion,
    ZeroMean,
    build_schedule,
    corrupt,
    corruption_field,
    init_center_field,
    spatial_field_step,
)


@pytest.fixture
def sched():
    return build_schedule(10, 1e-4, 0.02)


def test_beta_endpoints(sched):
    assert sched.betas[0] == pytest.approx(1e-4, abs=1e-18)
    assert sched.betas[-1] == pytest.approx(0.02, abs=1e-15)


def test_first_sigma_is_sqrt_beta1(sched):
    assert sched.sigma(1) == pytest.approx(0.01, abs=1e-12)


def test_last_sigma_against_explicit_product(sched):
    prod = 1.0
    for i in range(10):
        prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * i / 9)
    assert abs(sched.sigma(10) - np.sqrt(1.0 - prod)) < 1e-12


def test_single_step_schedule():
    s = build_schedule(1, 1e-4, 0.02)
    np.testing.assert_array_equal(s.betas, [1e-4])


@pytest.mark.parametrize("T", [0, -3])
def test_bad_step_count(T):
    with pytest.raises(ValueError):
        build_schedule(T)


@pytest.mark.parametrize("lo,hi", [(0.0, 0.02), (0.03, 0.02), (1e-4, 1.0)])
def test_betas_out_of_range(lo, hi):
    with pytest.raises(ValueError):
        build_schedule(10, lo, hi)


@settings(max_examples=40, deadline=None)
@given(T=st.integers(2, 400), lo=st.floats(1e-6, 1e-2), span=st.floats(1e-6, 0.04))
def test_schedule_invariants(T, lo, span):
    # beta_max <= 0.05 keeps alpha_bar_T above ~1e-9, so sigma stays distinguishable from 1
    s = build_schedule(T, lo, lo + span)
    assert np.all(np.diff(s.betas) > 0)
    assert np.all(np.diff(s.alpha_bars) < 0) and np.all((s.alpha_bars > 0) & (s.alpha_bars < 1))
    assert np.all(np.diff(s.sigmas) > 0) and np.all((s.sigmas > 0) & (s.sigmas < 1))
    np.testing.assert_allclose(s.sigmas**2 + s.alpha_bars, 1.0, atol=1e-12, rtol=0)


def test_sigma_rejects_out_of_range_steps(sched):
    for t in (0, 11):
        with pytest.raises(ValueError):
            sched.sigma(t)
    with pytest.raises(ValueError):
        corrupt(np.zeros((2, 2)), np.zeros((2, 2)), 0, sched)


# ---------------------------------------------------------------- corrupt


def test_zero_noise_is_identity(sched, rng):
    x = rng.standard_normal((4, 2))
    out = corrupt(x, np.zeros_like(x), 7, sched).data
    np.testing.assert_array_equal(out, x)


def test_zero_signal_gives_scaled_noise(sched, rng):
    e = rng.standard_normal((4, 2))
    np.testing.assert_allclose(corrupt(np.zeros_like(e), e, 4, sched).data, e * sched.sigma(4), rtol=0, atol=1e-15)


def test_nonzero_mean_at_first_step(sched, rng):
    x = rng.uniform(-1, 1, (6, 2))
    e = rng.standard_normal((6, 2))
    out = corrupt(x, e, 1, sched, NonZeroMean()).data
    np.testing.assert_allclose(out, np.sqrt(1 - 1e-4) * x + 0.01 * e, atol=1e-15)
    assert np.abs(out - (x + 0.01 * e)).max() < 1e-4


def test_zero_mean_is_affine(sched, rng):
    x1, x2, e1, e2 = (rng.standard_normal((3, 2)) for _ in range(4))
    a = 0.3
    lhs = corrupt(a * x1 + (1 - a) * x2, a * e1 + (1 - a) * e2, 5, sched).data
    rhs = a * corrupt(x1, e1, 5, sched).data + (1 - a) * corrupt(x2, e2, 5, sched).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-14)


def test_monte_carlo_mean_recovers_x(sched):
    rng = np.random.default_rng(99)
    n = 100_000
    x = np.array([0.4, -0.7])
    for t in (1, 10):
        out = corrupt(np.broadcast_to(x, (n, 2)).copy(), rng.standard_normal((n, 2)), t, sched).data
        assert np.all(np.abs(out.mean(0) - x) < 3 * sched.sigma(t) / np.sqrt(n))


def test_per_sample_steps(sched, rng):
    x = rng.standard_normal((3, 2))
    e = rng.standard_normal((3, 2))
    t = np.array([1, 5, 10])
    out = corrupt(x, e, t, sched).data
    for i in range(3):
        np.testing.assert_allclose(out[i], x[i] + e[i] * sched.sigma(int(t[i])))


def test_shape_mismatch(sched):
    with pytest.raises(ValueError):
        corrupt(np.zeros((2, 2)), np.zeros((2, 3)), 1, sched)


def test_corrupt_is_differentiable(sched, rng):
    x = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
    e = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
    backward(sum_squares(corrupt(x, e, 3, sched, NonZeroMean())))
    assert x.grad is not None and e.grad is not None


def test_spatial_corruption_scales_noise_by_field(sched, rng):
    x = rng.standard_normal((2, 1, 5, 5))
    e = rng.standard_normal((2, 1, 5, 5))
    kind = SpatialDiffusion(0.1)
    out = corrupt(x, e, 3, sched, kind).data
    c = corruption_field(5, 5, 3, kind)
    np.testing.assert_allclose(out, x + e * sched.sigma(3) * c[None, None], atol=1e-15)


def test_spatial_broadcasts_over_channels(sched):
    x = np.zeros((1, 3, 5, 5))
    e = np.ones((1, 3, 5, 5))
    out = corrupt(x, e, 2, sched, SpatialDiffusion(0.1)).data
    assert np.array_equal(out[0, 0], out[0, 2])


def test_spatial_needs_images(sched):
    with pytest.raises(ValueError):
        corrupt(np.zeros((2, 2)), np.zeros((2, 2)), 1, sched, SpatialDiffusion())


# ------------------------------------------------------------ spatial field


def test_uniform_field_is_fixed():
    f = np.full((6, 4), 0.37)
    np.testing.assert_array_equal(spatial_field_step(f, 0.2), f)


def test_one_step_from_center():
    f = spatial_field_step(init_center_field(5, 5), 0.1)
    assert f[2, 2] == pytest.approx(0.6, abs=1e-15)
    for i, j in ((1, 2), (3, 2), (2, 1), (2, 3)):
        assert f[i, j] == pytest.approx(0.1, abs=1e-15)
    assert f.sum() == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(h=st.integers(1, 9), w=st.integers(1, 9), ratio=st.floats(1e-3, 0.25), seed=st.integers(0, 1000))
def test_field_mass_range_and_contraction(h, w, ratio, seed):
    f = np.random.default_rng(seed).uniform(0, 1, (h, w))
    mass = f.sum()
    spread = f.max() - f.min()
    for _ in range(15):
        f = spatial_field_step(f, ratio)
        assert abs(f.sum() - mass) < 1e-12
        assert f.min() >= -1e-15 and f.max() <= 1 + 1e-15
        assert f.max() - f.min() <= spread + 1e-15
        spread = f.max() - f.min()


def test_field_tends_to_uniform():
    f = init_center_field(7, 7)
    for _ in range(3000):
        f = spatial_field_step(f, 0.25)
    np.testing.assert_allclose(f, 1 / 49, atol=1e-9)


@pytest.mark.parametrize("ratio", [0.0, -0.1, 0.26])
def test_ratio_bounds(ratio):
    with pytest.raises(ValueError):
        spatial_field_step(np.zeros((3, 3)), ratio)
    with pytest.raises(ValueError):
        SpatialDiffusion(ratio)


def test_center_field_cases():
    np.testing.assert_array_equal(init_center_field(1, 1), [[1.0]])
    f = init_center_field(3, 3)
    assert f[1, 1] == 1 and f.sum() == 1
    f = init_center_field(28, 28)
    assert np.count_nonzero(f) == 1 and f.sum() == 1 and f[14, 14] == 1
    with pytest.raises(ValueError):
        init_center_field(0, 3)


def test_field_spreads_with_step():
    kind = SpatialDiffusion(0.1)
    centres = [corruption_field(9, 9, t, kind)[4, 4] for t in range(1, 6)]
    assert all(a > b for a, b in zip(centres, centres[1:]))
    assert corruption_field(9, 9, 1, kind)[0, 0] == 0.0


def test_zero_mean_default_kind(sched, rng):
    x = rng.standard_normal((2, 2))
    e = rng.standard_normal((2, 2))
    assert np.array_equal(corrupt(x, e, 2, sched).data, corrupt(x, e, 2, sched, ZeroMean()).data)
