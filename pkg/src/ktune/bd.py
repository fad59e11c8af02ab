"""Bjontegaard delta metrics over cubic fits of log10(rate) against quality."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.polynomial import Polynomial

from ktune.errors import FitError, OverlapError
from ktune.model import RDCurve

# slack for domain checks on probe values that sit exactly on a curve endpoint
_EDGE_EPS = 1e-9


@dataclass(frozen=True)
class CubicFit:
    """Least-squares cubic ``y = p(x)``, solved on x mapped to [-1, 1] for conditioning."""

    poly: Polynomial
    domain: tuple[float, float]

    @classmethod
    def fit(cls, x, y) -> "CubicFit":
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if np.unique(x).size < 4:
            raise FitError("insufficient points for cubic fit")
        lo, hi = float(x.min()), float(x.max())
        t = (2.0 * x - (lo + hi)) / (hi - lo)
        vander = np.vander(t, 4, increasing=True)
        coef, _, rank, sv = np.linalg.lstsq(vander, y, rcond=None)
        if rank < 4 or sv[-1] / sv[0] < 1e-12:
            raise FitError("degenerate curve")
        return cls(Polynomial(coef, domain=[lo, hi], window=[-1, 1]), (lo, hi))

    @property
    def coefficients(self) -> tuple[float, float, float, float]:
        """Ascending-power coefficients in the raw x variable."""
        c = self.poly.convert(domain=[-1, 1], window=[-1, 1]).coef
        c = np.pad(c, (0, 4 - c.size))
        return tuple(float(v) for v in c)

    def __call__(self, x):
        return self.poly(x)

    def integral(self, a: float, b: float) -> float:
        anti = self.poly.integ()
        return float(anti(b) - anti(a))


def fit_log_rate(curve: RDCurve) -> CubicFit:
    """Fit log10(achieved rate) as a cubic in quality."""
    return CubicFit.fit(curve.metric.axis(curve.qualities), np.log10(curve.rates))


def fit_quality(curve: RDCurve) -> CubicFit:
    """Fit quality as a cubic in log10(achieved rate)."""
    return CubicFit.fit(np.log10(curve.rates), curve.metric.axis(curve.qualities))


@dataclass(frozen=True)
class BDResult:
    delta_log_rate: float  # mean log10(R_base) - log10(R_cand) over the overlap
    bd_rate_improvement: float  # percent, positive = candidate cheaper
    bd_quality_delta: float  # metric units, positive = candidate better
    overlap: tuple[float, float]

    @property
    def bd_rate_classic(self) -> float:
        """Classical BD-Rate percentage (negative = savings)."""
        return -self.bd_rate_improvement


def _overlap(a: CubicFit, b: CubicFit) -> tuple[float, float]:
    lo = max(a.domain[0], b.domain[0])
    hi = min(a.domain[1], b.domain[1])
    if not hi > lo:
        raise OverlapError("no overlapping quality range")
    return lo, hi


def mean_log_rate_gap(baseline: RDCurve, candidate: RDCurve) -> tuple[float, tuple[float, float]]:
    fb, fc = fit_log_rate(baseline), fit_log_rate(candidate)
    lo, hi = _overlap(fb, fc)
    return (fb.integral(lo, hi) - fc.integral(lo, hi)) / (hi - lo), (lo, hi)


def bd_rate(baseline: RDCurve, candidate: RDCurve) -> BDResult:
    if baseline.metric != candidate.metric:
        raise ValueError(f"metric mismatch: {baseline.metric} vs {candidate.metric}")
    delta, overlap = mean_log_rate_gap(baseline, candidate)
    improvement = (1.0 - 10.0 ** (-delta)) * 100.0

    qb, qc = fit_quality(baseline), fit_quality(candidate)
    try:
        rlo, rhi = _overlap(qb, qc)
        dq = (qc.integral(rlo, rhi) - qb.integral(rlo, rhi)) / (rhi - rlo)
    except OverlapError:
        dq = float("nan")
    return BDResult(float(delta), float(improvement), float(dq), overlap)


def rate_at_quality(curve: RDCurve, quality: float) -> float:
    """Bitrate where the fitted curve reaches ``quality``; no extrapolation."""
    fit = fit_log_rate(curve)
    q = float(curve.metric.axis(quality))
    lo, hi = fit.domain
    if q < lo - _EDGE_EPS or q > hi + _EDGE_EPS:
        raise OverlapError(f"quality outside curve range: {quality} not in [{lo:.6g}, {hi:.6g}]")
    return float(10.0 ** fit(q))


def savings_at_quality(baseline: RDCurve, candidate: RDCurve, quality: float) -> float:
    rb = rate_at_quality(baseline, quality)
    rc = rate_at_quality(candidate, quality)
    return (rb - rc) / rb * 100.0
