import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from d4pm.metrics import (CSV_COLUMNS, MetricsReport, SNR_CAP_DB, cc, cc_p_value, rrmse_s, rrmse_t, snr_out)


@pytest.fixture
def x(rng):
    return rng.standard_normal(64)


def test_rrmse_t_identities(x):
    assert rrmse_t(x, x) == 0
    assert rrmse_t(2 * x, x) == pytest.approx(1.0)
    assert rrmse_t(np.zeros_like(x), x) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        rrmse_t(x, np.zeros_like(x))


def test_rrmse_s_shift_invariance(x):
    assert rrmse_s(x, x) == 0
    assert rrmse_s(np.roll(x, 7), x) == pytest.approx(0.0, abs=1e-12)


def _naive_periodogram(v):
    n = v.size
    k = np.arange(n)
    return np.array([abs(np.sum(v * np.exp(-2j * np.pi * kk * k / n))) ** 2 / n for kk in range(n)])


def test_rrmse_s_matches_direct_dft(rng):
    n = 64
    white = rng.standard_normal(n)
    t = np.arange(n)
    band = np.sin(2 * np.pi * 5 * t / n) + 0.5 * np.cos(2 * np.pi * 9 * t / n + 0.3)
    for xh, ref in [(white, band), (band + 0.1 * white, band), (band, white)]:
        pa, pb = _naive_periodogram(xh), _naive_periodogram(ref)
        expected = np.sqrt(np.sum((pa - pb) ** 2)) / np.sqrt(np.sum(pb ** 2))
        assert rrmse_s(xh, ref) == pytest.approx(expected, abs=1e-9)


def test_cc_identities(x):
    assert cc(x, x) == pytest.approx(1.0)
    assert cc(-x, x) == pytest.approx(-1.0)
    with pytest.raises(ValueError):
        cc(np.ones(8), np.arange(8.0))
    with pytest.raises(ValueError):
        cc(np.arange(2.0), np.arange(2.0))


@given(st.floats(0.01, 100), st.floats(-50, 50), st.floats(0.01, 100), st.floats(-50, 50))
@settings(max_examples=100, deadline=None)
def test_cc_affine_invariance(a, b, c, d):
    r = np.random.default_rng(3)
    u, v = r.standard_normal(32), r.standard_normal(32)
    assert cc(a * u + b, c * v + d) == pytest.approx(cc(u, v), abs=1e-9)


def test_p_value_matches_permutation_test():
    r = np.random.default_rng(20)
    u = r.standard_normal(20)
    v = 0.35 * u + r.standard_normal(20)
    obs = abs(cc(u, v))
    perm = np.array([abs(cc(u, r.permutation(v))) for _ in range(10_000)])
    p_perm = np.mean(perm >= obs)
    assert 0.01 < p_perm < 0.9
    assert cc_p_value(u, v) == pytest.approx(p_perm, abs=0.02)


def test_p_value_range(x):
    assert cc_p_value(x, x) == 0.0
    assert 0 <= cc_p_value(x, np.roll(x, 3)) <= 1


def test_snr_out_cases():
    x = np.r_[10.0, np.zeros(7)]
    assert snr_out(x + np.r_[0, 1.0, np.zeros(6)], x) == pytest.approx(20.0)
    assert snr_out(x, x) == math.inf


def test_rrmse_monotone_along_segment(x, rng):
    xh = x + rng.standard_normal(x.size)
    errs = [rrmse_t(a * xh + (1 - a) * x, x) for a in np.linspace(1, 0, 11)]
    assert all(e1 > e2 for e1, e2 in zip(errs, errs[1:]))


def test_snr_decreases_with_noise(x, rng):
    noise = rng.standard_normal(x.size)
    snrs = [snr_out(x + s * noise, x) for s in (0.1, 0.2, 0.5, 1.0, 2.0)]
    assert all(a > b for a, b in zip(snrs, snrs[1:]))


def test_report_aggregate_and_io(tmp_path, rng):
    ref = [rng.standard_normal(32) for _ in range(6)]
    est = [r + 0.3 * rng.standard_normal(32) for r in ref]
    est[0] = ref[0].copy()
    labels = ["EOG", "EMG", "ECG"] * 2
    rep = MetricsReport.compute(est, ref, labels)
    assert rep.rows[0]["snr_out"] == SNR_CAP_DB
    agg = rep.aggregate()
    assert set(agg) == {"EOG", "EMG", "ECG", "overall"}
    assert agg["overall"]["cc"]["mean"] == pytest.approx(np.mean([r["cc"] for r in rep.rows]), abs=1e-12)
    assert agg["EMG"]["count"] == 2
    rep.write(tmp_path / "m.csv", tmp_path / "m.json")
    header = (tmp_path / "m.csv").read_text().splitlines()[0].split(",")
    assert tuple(header) == CSV_COLUMNS
    back = MetricsReport.read(tmp_path / "m.csv")
    assert back.rows == rep.rows
