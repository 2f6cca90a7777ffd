import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from d4pm.schedule import inference_level, make_schedule, sample_continuous_level, sample_continuous_levels


def test_single_step_schedule():
    s = make_schedule(1, 0.5, 0.5)
    np.testing.assert_array_equal(s.beta, [0.5])
    np.testing.assert_array_equal(s.alpha, [0.5])
    np.testing.assert_array_equal(s.alpha_bar, [0.5])


def test_three_step_running_product():
    s = make_schedule(3, 0.1, 0.3)
    np.testing.assert_allclose(s.beta, [0.1, 0.2, 0.3], rtol=1e-15)
    np.testing.assert_allclose(s.alpha, [0.9, 0.8, 0.7], rtol=1e-15)
    np.testing.assert_allclose(s.alpha_bar, [0.9, 0.72, 0.504], rtol=1e-14)


@pytest.mark.parametrize("args", [(2, 0.9, 0.1), (0, 0.1, 0.2), (-3, 0.1, 0.2), (5, 0.0, 0.1), (5, 0.1, 1.0)])
def test_rejects_bad_schedules(args):
    with pytest.raises(ValueError):
        make_schedule(*args)


def test_rejects_underflowing_schedule():
    with pytest.raises(ValueError, match="underflow"):
        make_schedule(1000, 0.9, 0.999)


def test_tables_are_read_only():
    s = make_schedule(4, 0.1, 0.2)
    with pytest.raises(ValueError):
        s.beta[0] = 0.5


@given(T=st.integers(1, 400), b0=st.floats(1e-6, 0.25), width=st.floats(0.0, 0.25))
@settings(max_examples=60, deadline=None)
def test_recurrence_and_monotonicity(T, b0, width):
    s = make_schedule(T, b0, b0 + width)
    assert np.all((s.beta > 0) & (s.beta < 1))
    np.testing.assert_array_equal(s.alpha, 1.0 - s.beta)
    prev = np.concatenate([[1.0], s.alpha_bar[:-1]])
    np.testing.assert_allclose(s.alpha_bar / prev, s.alpha, rtol=1e-12)
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert s.alpha_bar[0] == s.alpha[0]
    assert 0 < s.alpha_bar[-1] <= s.alpha_bar[0] < 1


def test_continuous_level_first_step_interval():
    s = make_schedule(50, 1e-4, 0.2)
    r = np.random.default_rng(0)
    for _ in range(100):
        lv = sample_continuous_level(s, 1, r)
        assert np.sqrt(s.alpha_bar[0]) <= lv.value <= 1.0
        assert lv.step == 1


def test_continuous_level_interval_t2():
    s = make_schedule(3, 0.1, 0.3)
    r = np.random.default_rng(5)
    vals = [sample_continuous_level(s, 2, r).value for _ in range(500)]
    assert min(vals) >= np.sqrt(0.72) and max(vals) <= np.sqrt(0.9)
    assert np.sqrt(0.72) == pytest.approx(0.8485, abs=1e-4)
    assert np.sqrt(0.9) == pytest.approx(0.9487, abs=1e-4)


def test_continuous_level_determinism():
    s = make_schedule(10, 0.01, 0.1)
    a = sample_continuous_level(s, 4, np.random.default_rng(9))
    b = sample_continuous_level(s, 4, np.random.default_rng(9))
    assert a == b


def test_continuous_level_uniform_statistics():
    s = make_schedule(20, 0.01, 0.2)
    t = 7
    lo, hi = np.sqrt(s.alpha_bar[t - 1]), np.sqrt(s.alpha_bar[t - 2])
    v = sample_continuous_levels(s, np.full(10_000, t), np.random.default_rng(3))
    assert v.min() >= lo and v.max() <= hi
    se = (hi - lo) / np.sqrt(12) / np.sqrt(v.size)
    assert abs(v.mean() - (lo + hi) / 2) < 3 * se


@pytest.mark.parametrize("t", [0, 4])
def test_level_step_out_of_range(t):
    s = make_schedule(3, 0.1, 0.3)
    with pytest.raises(ValueError):
        sample_continuous_level(s, t, np.random.default_rng(0))
    with pytest.raises(ValueError):
        inference_level(s, t)


def test_inference_level_values():
    assert inference_level(make_schedule(3, 0.1, 0.3), 3).value == pytest.approx(0.70993, abs=1e-5)
    assert inference_level(make_schedule(1, 0.5, 0.5), 1).value == np.sqrt(0.5)


def test_forward_marginal_moments():
    s = make_schedule(50, 1e-4, 0.2)
    t = 30
    ab = s.alpha_bar[t - 1]
    x0 = np.array([1.5, -0.7, 0.0])
    eps = np.random.default_rng(11).standard_normal((10_000, 3))
    xt = np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps
    var = 1 - ab
    assert np.all(np.abs(xt.mean(0) - np.sqrt(ab) * x0) < 5 * np.sqrt(var / 10_000))
    # SE of a sample variance for Gaussian data is var·√(2/(n-1)).
    assert np.all(np.abs(xt.var(0, ddof=1) - var) < 5 * var * np.sqrt(2 / 9_999))


def test_sigma_matches_posterior_variance():
    s = make_schedule(3, 0.1, 0.3)
    assert s.sigma_at(1) == 0.0
    assert s.sigma_at(2) ** 2 == pytest.approx(0.2 * 0.1 / 0.28, rel=1e-12)
