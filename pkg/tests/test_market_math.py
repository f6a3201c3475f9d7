"""Black-Scholes quantities, the normal CDF and the Hull-White correction."""
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvhedge.errors import DomainError
from mvhedge.market_math import (HwCoefficients, OptionKind, PricingInputs, bs_d, bs_delta,
                                 bs_gamma, bs_price, bs_theta, bs_vega, hw_correction,
                                 hw_delta, norm_cdf, norm_pdf, norm_ppf)

mpmath.mp.dps = 50


def mp_cdf(x: float) -> float:
    return float(mpmath.ncdf(mpmath.mpf(x)))


def mp_d(S, K, r, q, vol, tau):
    S, K, r, q, vol, tau = map(mpmath.mpf, (S, K, r, q, vol, tau))
    return (mpmath.log(S / K) + (r - q + vol ** 2 / 2) * tau) / (vol * mpmath.sqrt(tau))


def mp_call(S, K, r, q, vol, tau):
    d1 = mp_d(S, K, r, q, vol, tau)
    d2 = d1 - mpmath.mpf(vol) * mpmath.sqrt(tau)
    return float(S * mpmath.exp(-q * mpmath.mpf(tau)) * mpmath.ncdf(d1)
                 - K * mpmath.exp(-r * mpmath.mpf(tau)) * mpmath.ncdf(d2))


ATM = PricingInputs(spot=100.0, strike=100.0, rate=0.0, div_yield=0.0, vol=0.2, ttm=1.0)

valid_inputs = st.builds(
    PricingInputs,
    spot=st.floats(10, 5000),
    strike=st.floats(10, 5000),
    rate=st.floats(-0.02, 0.1),
    div_yield=st.floats(0.0, 0.06),
    vol=st.floats(0.05, 1.0),
    ttm=st.floats(14 / 365, 2.0),
)


class TestNormCdf:
    def test_zero(self):
        assert norm_cdf(0.0) == 0.5

    def test_196_against_mpmath(self):
        assert norm_cdf(1.96) == pytest.approx(mp_cdf(1.96), abs=1e-15)
        assert norm_cdf(1.96) == pytest.approx(0.9750021048517795, abs=1e-12)

    def test_grid_against_mpmath(self):
        xs = np.linspace(-38.0, 9.0, 2001)
        ref = np.array([mp_cdf(x) for x in xs])
        assert np.max(np.abs(norm_cdf(xs) - ref)) <= 1e-12
        scalar = np.array([norm_cdf(float(x)) for x in xs])
        assert np.max(np.abs(scalar - ref)) <= 1e-12

    def test_symmetry(self):
        xs = np.linspace(-8, 8, 1001)
        np.testing.assert_allclose(norm_cdf(xs) + norm_cdf(-xs), 1.0, atol=1e-15)

    def test_monotone_on_1e4_grid(self):
        xs = np.linspace(-6, 6, 10_000)
        assert np.all(np.diff(norm_cdf(xs)) > 0)

    @pytest.mark.parametrize("bad", [math.nan, math.inf, -math.inf])
    def test_non_finite_rejected(self, bad):
        with pytest.raises(DomainError):
            norm_cdf(bad)
        with pytest.raises(DomainError):
            norm_cdf(np.array([0.0, bad]))

    def test_ppf_inverts_cdf(self):
        ps = np.linspace(0.001, 0.999, 99)
        np.testing.assert_allclose(norm_cdf(norm_ppf(ps)), ps, atol=1e-14)
        with pytest.raises(DomainError):
            norm_ppf(1.0)

    def test_pdf(self):
        assert norm_pdf(0.0) == pytest.approx(1 / math.sqrt(2 * math.pi), rel=1e-15)


class TestPricingInputs:
    @pytest.mark.parametrize("field", ["spot", "strike", "vol", "ttm"])
    def test_non_positive_rejected(self, field):
        kw = dict(spot=100.0, strike=100.0, rate=0.0, div_yield=0.0, vol=0.2, ttm=1.0)
        kw[field] = 0.0
        with pytest.raises(DomainError):
            PricingInputs(**kw)

    def test_nan_rejected(self):
        with pytest.raises(DomainError):
            PricingInputs(100.0, 100.0, math.nan, 0.0, 0.2, 1.0)

    def test_negative_rate_allowed(self):
        PricingInputs(100.0, 100.0, -0.01, 0.0, 0.2, 1.0)

    def test_coefficients_must_be_finite(self):
        with pytest.raises(DomainError):
            HwCoefficients(0.0, math.inf, 0.0)


class TestD:
    def test_atm(self):
        assert bs_d(ATM) == pytest.approx(0.1, abs=1e-15)

    def test_substitution(self):
        p = PricingInputs(100.0, 100.0, 0.02, 0.01, 0.2, 0.25)
        assert bs_d(p) == pytest.approx(0.075, abs=1e-15)

    def test_otm_against_mpmath(self):
        p = PricingInputs(100.0, 120.0, 0.0, 0.0, 0.25, 0.5)
        ref = float(mp_d(100, 120, 0, 0, 0.25, 0.5))
        assert bs_d(p) == pytest.approx(ref, abs=1e-14)
        assert ref == pytest.approx(-0.942978, abs=1e-6)

    def test_vectorized_matches_scalar(self):
        S = np.array([90.0, 100.0, 110.0])
        p = PricingInputs(S, 100.0, 0.01, 0.0, 0.2, 0.5)
        expect = [bs_d(PricingInputs(float(s), 100.0, 0.01, 0.0, 0.2, 0.5)) for s in S]
        np.testing.assert_array_equal(bs_d(p), expect)


class TestDelta:
    def test_atm_call(self):
        assert bs_delta(ATM, OptionKind.CALL) == pytest.approx(mp_cdf(0.1), abs=1e-15)
        assert bs_delta(ATM, OptionKind.CALL) == pytest.approx(0.539828, abs=1e-6)

    def test_atm_put(self):
        assert bs_delta(ATM, OptionKind.PUT) == pytest.approx(-0.460172, abs=1e-6)

    def test_deep_itm_tiny_vol(self):
        p = PricingInputs(110.0, 100.0, 0.0, 0.0, 1e-8, 1.0)
        assert bs_delta(p, OptionKind.CALL) == pytest.approx(1.0, abs=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(valid_inputs)
    def test_put_call_relation_and_ranges(self, p):
        c = bs_delta(p, OptionKind.CALL)
        put = bs_delta(p, OptionKind.PUT)
        assert abs(put - (c - 1.0)) <= 1e-14
        assert 0.0 <= c <= 1.0
        assert -1.0 <= put <= 0.0

    def test_strict_ranges_for_moderate_inputs(self):
        rng = np.random.default_rng(3)
        p = PricingInputs(rng.uniform(80, 120, 1000), 100.0, 0.01, 0.01,
                          rng.uniform(0.1, 0.5, 1000), rng.uniform(0.05, 1.0, 1000))
        c = bs_delta(p, OptionKind.CALL)
        assert np.all((c > 0) & (c < 1))


class TestVegaAndPrice:
    def test_atm_vega(self):
        ref = 100.0 * float(mpmath.npdf(0.1))
        assert bs_vega(ATM) == pytest.approx(ref, rel=1e-14)
        assert bs_vega(ATM) == pytest.approx(39.695, abs=1e-3)

    def test_vega_homogeneous_in_spot(self):
        p2 = PricingInputs(200.0, 200.0, 0.0, 0.0, 0.2, 1.0)
        assert bs_vega(p2) == pytest.approx(2 * bs_vega(ATM), rel=1e-14)

    def test_vega_vanishes_as_ttm_shrinks(self):
        p = PricingInputs(100.0, 100.0, 0.0, 0.0, 0.2, 1e-10)
        assert bs_vega(p) < 1e-3

    def test_vega_matches_price_derivative(self):
        h = 1e-6
        up = PricingInputs(100.0, 95.0, 0.02, 0.01, 0.2 + h, 0.4)
        dn = PricingInputs(100.0, 95.0, 0.02, 0.01, 0.2 - h, 0.4)
        fd = (bs_price(up, OptionKind.CALL) - bs_price(dn, OptionKind.CALL)) / (2 * h)
        assert bs_vega(PricingInputs(100.0, 95.0, 0.02, 0.01, 0.2, 0.4)) == pytest.approx(fd, rel=1e-7)

    def test_atm_price(self):
        assert bs_price(ATM, OptionKind.CALL) == pytest.approx(mp_call(100, 100, 0, 0, 0.2, 1.0), abs=1e-12)
        assert bs_price(ATM, OptionKind.CALL) == pytest.approx(7.9656, abs=1e-4)

    def test_zero_strike_limit(self):
        p = PricingInputs(100.0, 1e-9, 0.03, 0.02, 0.2, 1.0)
        assert bs_price(p, OptionKind.CALL) == pytest.approx(100.0 * math.exp(-0.02), rel=1e-10)

    @settings(max_examples=200, deadline=None)
    @given(valid_inputs)
    def test_put_call_parity(self, p):
        lhs = bs_price(p, OptionKind.CALL) - bs_price(p, OptionKind.PUT)
        rhs = p.spot * math.exp(-p.div_yield * p.ttm) - p.strike * math.exp(-p.rate * p.ttm)
        assert abs(lhs - rhs) <= 1e-10 * max(1.0, p.spot, p.strike) / 100

    @settings(max_examples=100, deadline=None)
    @given(valid_inputs)
    def test_price_bounds(self, p):
        c = bs_price(p, OptionKind.CALL)
        fwd = p.spot * math.exp(-p.div_yield * p.ttm) - p.strike * math.exp(-p.rate * p.ttm)
        assert c >= max(fwd, 0.0) - 1e-9 * p.spot

    def test_gamma_and_theta_match_differences(self):
        base = dict(strike=100.0, rate=0.02, div_yield=0.01, vol=0.25)
        h = 1e-3
        price = lambda S, t: bs_price(PricingInputs(S, ttm=t, **base), OptionKind.PUT)
        p = PricingInputs(103.0, ttm=0.5, **base)
        fd_gamma = (price(103 + h, 0.5) - 2 * price(103, 0.5) + price(103 - h, 0.5)) / h**2
        assert bs_gamma(p) == pytest.approx(fd_gamma, rel=1e-5)
        fd_theta = -(price(103, 0.5 + 1e-6) - price(103, 0.5 - 1e-6)) / 2e-6
        assert bs_theta(p, OptionKind.PUT) == pytest.approx(fd_theta, rel=1e-6)


class TestHullWhite:
    def test_zero_coefficients_bitwise(self):
        rng = np.random.default_rng(0)
        p = PricingInputs(rng.uniform(50, 150, 500), 100.0, 0.01, 0.02,
                          rng.uniform(0.1, 0.6, 500), rng.uniform(0.05, 1.5, 500))
        zero = HwCoefficients(0.0, 0.0, 0.0)
        for kind in OptionKind:
            np.testing.assert_array_equal(hw_delta(p, kind, zero), bs_delta(p, kind))

    def test_injected_greeks(self):
        corr = hw_correction(0.5, 20.0, 100.0, 0.25, HwCoefficients(1.0, 0.0, 0.0))
        assert 0.5 + corr == pytest.approx(0.9, abs=1e-15)

    def test_matches_scalar_reevaluation(self):
        rng = np.random.default_rng(11)
        coef = HwCoefficients(0.02, -0.05, 0.03)
        for _ in range(50):
            S, K = rng.uniform(50, 150), rng.uniform(50, 150)
            vol, tau = rng.uniform(0.1, 0.6), rng.uniform(0.05, 1.5)
            kind = OptionKind.CALL if rng.random() < 0.5 else OptionKind.PUT
            p = PricingInputs(S, K, 0.01, 0.0, vol, tau)
            d = float(mp_d(S, K, 0.01, 0.0, vol, tau))
            delta = mp_cdf(d) - (0.0 if kind is OptionKind.CALL else 1.0)
            vega = S * float(mpmath.npdf(d)) * math.sqrt(tau)
            ref = delta + vega / (S * math.sqrt(tau)) * (0.02 - 0.05 * delta + 0.03 * delta**2)
            assert hw_delta(p, kind, coef) == pytest.approx(ref, abs=1e-13)


class TestOptionKind:
    @pytest.mark.parametrize("text,kind", [("C", OptionKind.CALL), ("p", OptionKind.PUT),
                                           (OptionKind.PUT, OptionKind.PUT)])
    def test_parse(self, text, kind):
        assert OptionKind.parse(text) is kind

    def test_sign(self):
        assert OptionKind.CALL.sign == 1 and OptionKind.PUT.sign == -1
