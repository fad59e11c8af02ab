import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import brentq

from conftest import synthetic_curve
from ktune import bd
from ktune.encoders import PROFILE_A, SyntheticProfile
from ktune.errors import FitError, OverlapError
from ktune.model import PSNR, SSIM, QualityMetric, MetricKind, RDCurve, default_bitrate_ladder

LADDER = default_bitrate_ladder()


def normal_equations_fit(x, y):
    """Oracle: raw-power cubic from the explicit 4x4 normal equations."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    ata = np.array([[np.sum(x ** (i + j)) for j in range(4)] for i in range(4)])
    aty = np.array([np.sum(y * x**i) for i in range(4)])
    return np.linalg.solve(ata, aty)


def trapezoid_mean_gap(base: RDCurve, cand: RDCurve, n: int = 10_000) -> float:
    """Oracle: mean log-rate gap over the overlap by the trapezoid rule on the same fits."""
    fb, fc = bd.fit_log_rate(base), bd.fit_log_rate(cand)
    lo = max(fb.domain[0], fc.domain[0])
    hi = min(fb.domain[1], fc.domain[1])
    q = np.linspace(lo, hi, n + 1)
    diff = fb(q) - fc(q)
    h = (hi - lo) / n
    return float(h * (diff.sum() - 0.5 * (diff[0] + diff[-1])) / (hi - lo))


def line_curve(qualities, scale=1.0):
    # log10(R) = 0.1 * D + 1
    return RDCurve.from_arrays([scale * 10 ** (0.1 * q + 1) for q in qualities], qualities)


def test_exact_linear_recovery():
    fit = bd.fit_log_rate(line_curve([30, 33, 36, 40]))
    assert np.allclose(fit.coefficients, (1.0, 0.1, 0.0, 0.0), atol=1e-9)


def test_exact_cubic_recovery():
    coeffs = (2.0, 0.3, -0.01, 2e-4)
    q = np.linspace(30, 44, 11)
    logr = sum(c * q**i for i, c in enumerate(coeffs))
    curve = RDCurve.from_arrays(10**logr, q)
    fit = bd.fit_log_rate(curve)
    resid = np.abs(fit(q) - logr)
    assert resid.max() < 1e-9 * max(1.0, np.ptp(logr))


def test_synthetic_fit_matches_normal_equations_oracle():
    curve = synthetic_curve(PROFILE_A, 1.0)
    fit = bd.fit_log_rate(curve)
    oracle = normal_equations_fit(curve.qualities, np.log10(curve.rates))
    span = np.ptp(np.log10(curve.rates))
    q = curve.qualities
    oracle_vals = sum(c * q**i for i, c in enumerate(oracle))
    assert np.max(np.abs(fit(q) - oracle_vals)) < 1e-6 * span
    # the model is not exactly cubic in log-rate, but it is close
    assert np.max(np.abs(fit(q) - np.log10(curve.rates))) < 1e-4 * span


def test_fit_errors():
    with pytest.raises(FitError, match="insufficient points"):
        bd.CubicFit.fit([30, 30, 31, 32], [4, 4.1, 4.2, 4.3])


def test_identical_curves_exact_zero():
    c = synthetic_curve(PROFILE_A, 1.0)
    r = bd.bd_rate(c, c)
    assert r.bd_rate_improvement == 0.0
    assert r.bd_quality_delta == 0.0
    assert r.delta_log_rate == 0.0


def test_uniform_rate_scaling_ten_percent():
    base = synthetic_curve(PROFILE_A, 1.0)
    cand = RDCurve.from_arrays(base.rates * 0.9, base.qualities)
    r = bd.bd_rate(base, cand)
    assert r.bd_rate_improvement == pytest.approx(10.0, abs=1e-6)
    assert r.bd_rate_classic == pytest.approx(-10.0, abs=1e-6)
    assert r.bd_quality_delta > 0


def test_profile_a_matches_trapezoid_oracle():
    base, cand = synthetic_curve(PROFILE_A, 1.0), synthetic_curve(PROFILE_A, PROFILE_A.k_star)
    r = bd.bd_rate(base, cand)
    oracle = (1 - 10 ** (-trapezoid_mean_gap(base, cand))) * 100
    assert r.bd_rate_improvement > 0
    assert abs(r.bd_rate_improvement - oracle) < 1e-6


def test_no_overlap():
    a = line_curve([30, 31, 32, 33])
    b = line_curve([40, 41, 42, 43])
    with pytest.raises(OverlapError, match="no overlapping quality range"):
        bd.bd_rate(a, b)


def test_overlap_bounds():
    a = line_curve([30, 32, 34, 36, 38])
    b = line_curve([33, 35, 37, 39, 41], scale=0.8)
    assert bd.bd_rate(a, b).overlap == (33, 38)


def test_rate_at_quality_closed_form():
    c = line_curve([30, 35, 42, 45])
    assert bd.rate_at_quality(c, 40) == pytest.approx(1e5, abs=1e-3)
    with pytest.raises(OverlapError, match="quality outside curve range"):
        bd.rate_at_quality(c, 29.0)
    with pytest.raises(OverlapError):
        bd.rate_at_quality(c, 45.5)


def _inverse(profile, quality, k):
    return brentq(lambda r: profile.quality(r, k) - quality, 1e5, 1e8, xtol=1e-9, rtol=1e-15)


def test_rate_at_quality_profile_a_vs_analytic_inverse():
    c = synthetic_curve(PROFILE_A, 1.0)
    got = bd.rate_at_quality(c, 40.0)
    assert got == pytest.approx(_inverse(PROFILE_A, 40.0, 1.0), rel=1e-3)


def test_savings_uniform_scaling():
    base = synthetic_curve(PROFILE_A, 1.0)
    assert bd.savings_at_quality(base, base, 40.0) == 0.0
    cand = RDCurve.from_arrays(base.rates * 0.95, base.qualities)
    assert bd.savings_at_quality(base, cand, 40.0) == pytest.approx(5.0, abs=1e-6)


def test_savings_profile_a_vs_analytic_inverse():
    base, cand = synthetic_curve(PROFILE_A, 1.0), synthetic_curve(PROFILE_A, PROFILE_A.k_star)
    r1, rk = _inverse(PROFILE_A, 40.0, 1.0), _inverse(PROFILE_A, 40.0, PROFILE_A.k_star)
    oracle = (r1 - rk) / r1 * 100
    assert abs(bd.savings_at_quality(base, cand, 40.0) - oracle) < 0.01


def test_metric_mismatch_rejected():
    a = RDCurve.from_arrays([1e5, 2e5, 3e5, 4e5], [0.90, 0.92, 0.94, 0.96], SSIM)
    b = RDCurve.from_arrays([1e5, 2e5, 3e5, 4e5], [30, 32, 34, 36], PSNR)
    with pytest.raises(ValueError):
        bd.bd_rate(a, b)


def test_ssim_db_axis():
    m = QualityMetric(MetricKind.SSIM, ssim_db=True)
    q = [0.90, 0.95, 0.98, 0.99, 0.995]
    a = RDCurve.from_arrays([1e5, 2e5, 4e5, 8e5, 1.6e6], q, m)
    b = RDCurve.from_arrays([0.9e5, 1.8e5, 3.6e5, 7.2e5, 1.44e6], q, m)
    assert bd.fit_log_rate(a).domain == pytest.approx((10.0, -10 * math.log10(0.005)))
    assert bd.bd_rate(a, b).bd_rate_improvement == pytest.approx(10.0, abs=1e-6)


# -- properties --------------------------------------------------------------

profiles = st.builds(
    SyntheticProfile,
    P0=st.floats(34, 42),
    R0=st.just(1e6),
    s=st.floats(1.8, 3.5),
    c=st.floats(-0.1, 0.05),
    k_star=st.floats(0.4, 2.6),
    w=st.floats(0.05, 0.6),
    g=st.floats(0.0, 0.9),
)
ks = st.floats(0.3, 2.8)


@settings(max_examples=40, deadline=None)
@given(p=profiles, ka=ks, kb=ks)
def test_antisymmetry(p, ka, kb):
    a, b = synthetic_curve(p, ka), synthetic_curve(p, kb)
    dab, _ = bd.mean_log_rate_gap(a, b)
    dba, _ = bd.mean_log_rate_gap(b, a)
    assert abs(dab + dba) < 1e-12


@settings(max_examples=40, deadline=None)
@given(p=profiles, k=ks, scale=st.floats(0.01, 100.0), shift=st.floats(-5, 5))
def test_scale_and_shift_invariance(p, k, scale, shift):
    a, b = synthetic_curve(p, 1.0), synthetic_curve(p, k)
    ref = bd.bd_rate(a, b).bd_rate_improvement
    scaled = bd.bd_rate(RDCurve.from_arrays(a.rates * scale, a.qualities), RDCurve.from_arrays(b.rates * scale, b.qualities))
    shifted = bd.bd_rate(RDCurve.from_arrays(a.rates, a.qualities + shift), RDCurve.from_arrays(b.rates, b.qualities + shift))
    assert abs(scaled.bd_rate_improvement - ref) < 1e-9
    assert abs(shifted.bd_rate_improvement - ref) < 1e-9


@settings(max_examples=40, deadline=None)
@given(p=profiles, k=ks)
def test_self_comparison_zero(p, k):
    c = synthetic_curve(p, k)
    assert bd.bd_rate(c, c).bd_rate_improvement == 0.0


@settings(max_examples=30, deadline=None)
@given(coeffs=st.tuples(st.floats(1, 3), st.floats(0.05, 0.3), st.floats(-0.005, 0.005), st.floats(-1e-4, 1e-4)))
def test_cubic_data_fits_exactly(coeffs):
    q = np.linspace(30, 44, 11)
    logr = sum(c * q**i for i, c in enumerate(coeffs))
    fit = bd.CubicFit.fit(q, logr)
    assert np.max(np.abs(fit(q) - logr)) < 1e-9 * max(1.0, np.ptp(logr))
