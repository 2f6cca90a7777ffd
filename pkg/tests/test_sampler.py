import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from d4pm.oracle import GaussianPrior, OracleDenoiser, reverse_chain_moments
from d4pm.sampler import (SamplerConfig, SamplingError, consistency_step, joint_sample, posterior_mean,
                          predict_x0, predict_x0_as_printed, single_branch_sample)
from d4pm.schedule import make_schedule

S3 = make_schedule(3, 0.1, 0.3)


def test_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(lambda_dc=1.5)
    with pytest.raises(ValueError):
        SamplerConfig(lambda_snr=0.0)
    with pytest.raises(ValueError):
        SamplerConfig(artifact_x0_formula="other")


def test_predict_x0_zero_eps():
    x = np.array([0.3, -1.0])
    np.testing.assert_allclose(predict_x0(S3, 2, x, np.zeros(2)), x / np.sqrt(0.72), rtol=1e-15)


def test_predict_x0_inverts_forward_noising(rng):
    s = make_schedule(50, 1e-4, 0.2)
    x0, eps = rng.standard_normal(32), rng.standard_normal(32)
    for t in (1, 17, 50):
        ab = s.alpha_bar[t - 1]
        xt = np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps
        np.testing.assert_allclose(predict_x0(s, t, xt, eps), x0, atol=1e-10)


def test_predict_x0_hand_value():
    assert predict_x0(S3, 3, np.array([1.0]), np.array([1.0]))[0] == pytest.approx(
        (1 - np.sqrt(0.496)) / np.sqrt(0.504), rel=1e-12)
    assert predict_x0(S3, 3, np.array([1.0]), np.array([1.0]))[0] == pytest.approx(0.4166, abs=5e-4)


def test_as_printed_formula_differs():
    x, e = np.array([1.0]), np.array([1.0])
    # (1 - 0.3/√0.496) / √0.7
    assert predict_x0_as_printed(S3, 3, x, e)[0] == pytest.approx((1 - 0.3 / np.sqrt(0.496)) / np.sqrt(0.7))
    assert predict_x0_as_printed(S3, 3, x, e)[0] != pytest.approx(predict_x0(S3, 3, x, e)[0])


def test_consistency_no_residual():
    x0, x0p = np.array([1.0, 2.0]), np.array([0.5, -1.0])
    a, b, r = consistency_step(x0, x0p, x0 + x0p, SamplerConfig(lambda_dc=0.3))
    np.testing.assert_array_equal(r, 0.0)
    np.testing.assert_array_equal(a, x0)
    np.testing.assert_array_equal(b, x0p)


def test_consistency_endpoint():
    x0, x0p, y = np.array([1.0]), np.array([2.0]), np.array([5.0])
    a, b, r = consistency_step(x0, x0p, y, SamplerConfig(lambda_dc=1.0))
    assert r[0] == 2.0 and a[0] == 3.0 and b[0] == 2.0


@given(st.floats(0, 1), st.integers(0, 2**31))
@settings(max_examples=100, deadline=None)
def test_consistency_identity(lam, seed):
    r = np.random.default_rng(seed)
    x0, x0p, y = r.standard_normal((3, 24)) * 3
    a, b, _ = consistency_step(x0, x0p, y, SamplerConfig(lambda_dc=lam))
    assert np.linalg.norm(y - (a + b)) <= 1e-12 * max(1.0, np.linalg.norm(y))


def test_posterior_mean_t1_is_x0():
    x0h, xt = np.array([0.4, -0.2]), np.array([3.0, 1.0])
    np.testing.assert_allclose(posterior_mean(S3, 1, x0h, xt), x0h, rtol=1e-15)


def test_posterior_mean_hand_value():
    mu = posterior_mean(S3, 2, np.array([1.0]), np.array([1.0]))[0]
    assert mu == pytest.approx((0.2 * np.sqrt(0.9) + 0.1 * np.sqrt(0.8)) / 0.28, rel=1e-12)
    assert mu == pytest.approx(0.99707, abs=1e-5)


def test_posterior_mean_on_noiseless_trajectory(rng):
    s = make_schedule(50, 1e-4, 0.2)
    x0 = rng.standard_normal(8)
    for t in range(1, 51):
        xt = np.sqrt(s.alpha_bar_at(t)) * x0
        np.testing.assert_allclose(posterior_mean(s, t, x0, xt), np.sqrt(s.alpha_bar_at(t - 1)) * x0, atol=1e-10)


UNIT = GaussianPrior(np.zeros(8), 1.0)
S = make_schedule(50, 1e-4, 0.2)


def _oracle():
    return OracleDenoiser(UNIT, S)


def test_joint_sample_per_step_identity():
    y = np.random.default_rng(0).standard_normal(8)
    gaps = []

    def trace(st):
        gaps.append(np.linalg.norm(y - (st.x0_hat + st.x0_hat_art)) / np.linalg.norm(y))

    joint_sample(_oracle(), _oracle(), y, None, S, SamplerConfig(lambda_dc=0.3), np.random.default_rng(1), trace)
    assert len(gaps) == 50 and max(gaps) <= 1e-6


def test_joint_sample_deterministic():
    y = np.random.default_rng(0).standard_normal((4, 8))
    a = joint_sample(_oracle(), _oracle(), y, None, S, SamplerConfig(seed=3))
    b = joint_sample(_oracle(), _oracle(), y, None, S, SamplerConfig(seed=3))
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])
    c = joint_sample(_oracle(), _oracle(), y, None, S, SamplerConfig(seed=4))
    assert not np.array_equal(a[0], c[0])


def test_independent_eta_changes_draws():
    y = np.random.default_rng(0).standard_normal(8)
    a = joint_sample(_oracle(), _oracle(), y, None, S, SamplerConfig(seed=3))
    b = joint_sample(_oracle(), _oracle(), y, None, S, SamplerConfig(seed=3, share_eta=False))
    assert not np.array_equal(a[0], b[0])
    np.testing.assert_allclose(b[0] + b[1], y, atol=1e-12)


def test_stochastic_level_passes_step():
    seen = []

    def eps(x, y, level, z):
        seen.append(level)
        return np.zeros_like(x)

    joint_sample(eps, eps, np.ones(8), None, S, SamplerConfig(stochastic_level=True), np.random.default_rng(0))
    for lv in seen:
        assert np.sqrt(S.alpha_bar_at(lv.step)) <= lv.value <= np.sqrt(S.alpha_bar_at(lv.step - 1))


def test_nonfinite_state_reports_step():
    def bad(x, y, level, z):
        return np.full_like(x, np.nan) if level.step == 37 else np.zeros_like(x)

    with pytest.raises(SamplingError) as info:
        joint_sample(bad, _oracle(), np.ones(8), None, S, SamplerConfig())
    assert info.value.step == 37


def test_single_branch_liveness_and_determinism():
    y = np.ones(8)
    a = single_branch_sample(_oracle(), y, None, S, SamplerConfig(seed=2))
    b = single_branch_sample(_oracle(), y, None, S, SamplerConfig(seed=2))
    assert a.shape == (8,) and np.all(np.isfinite(a))
    np.testing.assert_array_equal(a, b)


def test_single_branch_matches_reverse_chain_moments():
    prior = GaussianPrior(np.linspace(-2, 2, 8), 0.5)
    runs = 1000
    x = single_branch_sample(OracleDenoiser(prior, S), np.zeros((runs, 8)), None, S, SamplerConfig(seed=9))
    mean, var = reverse_chain_moments(prior, S)
    z = (x.mean(0) - mean) / np.sqrt(var / runs)
    assert np.all(np.abs(z) < 3.5), z


def test_reverse_chain_moments_against_brute_force():
    # Independent route: propagate many deterministic linear chains explicitly.
    prior = GaussianPrior(np.array([0.7]), 1.3)
    s = make_schedule(10, 0.01, 0.3)
    mean, var = reverse_chain_moments(prior, s)
    r = np.random.default_rng(0)
    n = 400_000
    x = r.standard_normal(n)
    for t in range(s.T, 0, -1):
        ab = s.alpha_bar_at(t)
        x0 = (np.sqrt(ab) * 1.69 * x + (1 - ab) * 0.7) / (ab * 1.69 + 1 - ab)
        if t == 1:
            break
        c1 = s.beta_at(t) * np.sqrt(s.alpha_bar_at(t - 1)) / (1 - ab)
        c2 = (1 - s.alpha_bar_at(t - 1)) * np.sqrt(s.alpha_at(t)) / (1 - ab)
        x = c1 * x0 + c2 * x + s.sigma_at(t) * r.standard_normal(n)
    assert abs(x0.mean() - mean[0]) < 4 * np.sqrt(var / n)
    assert x0.var() == pytest.approx(var, rel=0.01)
