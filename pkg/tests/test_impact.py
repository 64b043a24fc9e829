"""Tests for the truncated impact function and the effective diffusion loadings."""
import unittest

import numpy as np

from src.models.impact import (
    CORRELATED,
    FRICTIONLESS,
    ImpactParams,
    coeff_jacobians,
    effective_coeffs,
    lambda_bar,
    physical_drift,
)
from src.models.margrabe import MarketState, ModelParams, margrabe_greeks
from src.utils.errors import InvalidParamsError, RegularityError

MODEL = ModelParams(sigma1=0.4, sigma2=0.2, rho=0.5, r=0.05)
IMPACT = ImpactParams(epsilon=0.04)
T = 0.5


def _sigma(s1, s2, t=0.1, impact=IMPACT):
    return effective_coeffs(t, MarketState(s1, s2), T, MODEL, impact).sigma_matrix()


def _jac(s1, s2, t=0.1, impact=IMPACT):
    return coeff_jacobians(t, MarketState(s1, s2), T, MODEL, impact).jac


def _five_point(func, s, axis, rel_step=1e-3):
    h = rel_step * s[axis]

    def at(k):
        moved = s.copy()
        moved[axis] += k * h
        return func(moved)

    return (-at(2) + 8.0 * at(1) - 8.0 * at(-1) + at(-2)) / (12.0 * h)


class TestLambdaBar(unittest.TestCase):
    def test_vanishes_at_expiry(self):
        self.assertEqual(lambda_bar(T, 60.0, T, IMPACT), 0.0)

    def test_saturates_far_from_expiry(self):
        self.assertAlmostEqual(lambda_bar(0.0, 60.0, T, IMPACT), IMPACT.epsilon, places=12)

    def test_monotone_in_time(self):
        levels = [lambda_bar(t, 60.0, T, IMPACT) for t in np.linspace(0.0, T, 11)]
        self.assertTrue(all(a >= b for a, b in zip(levels, levels[1:])))

    def test_zero_outside_band(self):
        """Below the floor or above the cap there is no impact."""
        impact = ImpactParams(epsilon=0.04, floor=1.0, cap=100.0)
        values = lambda_bar(0.0, np.array([0.5, 1.0, 50.0, 100.0, 150.0]), T, impact)
        self.assertEqual(values[0], 0.0)
        self.assertEqual(values[-1], 0.0)
        self.assertTrue(np.all(values[1:4] > 0.0))

    def test_invalid_params(self):
        with self.assertRaises(InvalidParamsError):
            ImpactParams(epsilon=-0.1)
        with self.assertRaises(InvalidParamsError):
            ImpactParams(floor=10.0, cap=1.0)
        with self.assertRaises(InvalidParamsError):
            ImpactParams(delta0=1.5)


class TestEffectiveCoeffs(unittest.TestCase):
    def test_frictionless_loadings_are_gbm(self):
        coeffs = effective_coeffs(0.1, MarketState(60.0, 80.0), T, MODEL, FRICTIONLESS)
        self.assertAlmostEqual(coeffs.sig11, 0.4 * 60.0, places=12)
        self.assertEqual(coeffs.sig12, 0.0)
        self.assertAlmostEqual(coeffs.sig21, 0.2 * 80.0 * 0.5, places=12)
        self.assertAlmostEqual(coeffs.sig22, 0.2 * 80.0 * np.sqrt(0.75), places=12)
        self.assertEqual(coeffs.denom, 1.0)
        self.assertAlmostEqual(coeffs.mu1, 0.05 * 60.0, places=12)

    def test_impact_raises_asset1_volatility(self):
        """Gamma11 > 0, so the feedback amplifies sigma1 and loads asset 1 on W2."""
        frictionless = _sigma(60.0, 80.0, impact=FRICTIONLESS)
        impacted = _sigma(60.0, 80.0)
        self.assertGreater(impacted[0, 0], frictionless[0, 0])
        self.assertLess(impacted[0, 1], 0.0)
        np.testing.assert_array_equal(impacted[1], frictionless[1])

    def test_vectorised_matches_scalar(self):
        s1 = np.array([40.0, 60.0, 90.0])
        s2 = np.array([50.0, 80.0, 70.0])
        batch = _sigma(s1, s2)
        for i in range(3):
            np.testing.assert_allclose(batch[:, :, i], _sigma(s1[i], s2[i]), rtol=1e-14)

    def test_denominator_stays_near_one_close_to_expiry(self):
        """lambda_bar vanishes faster than Gamma11 blows up at the money."""
        for s in (10.0, 60.0):
            for tau in (1e-4, 1e-5, 1e-6, 1e-7, 1e-8):
                coeffs = effective_coeffs(T - tau, MarketState(s, s), T, MODEL, ImpactParams(epsilon=0.04, beta=100.0))
                self.assertGreater(coeffs.denom, 0.5, msg=f"s={s} tau={tau}")

    def test_denominator_composes_lambda_and_gamma(self):
        state = MarketState(60.0, 80.0)
        coeffs = effective_coeffs(0.0, state, T, MODEL, IMPACT)
        expected = 1.0 - lambda_bar(0.0, 60.0, T, IMPACT) * margrabe_greeks(state, T, MODEL).gamma11
        self.assertAlmostEqual(float(coeffs.denom), float(expected), delta=1e-14)

    def test_regularity_violation(self):
        """A large epsilon near the money and near expiry breaks 1 - lambda Gamma11 > 0."""
        impact = ImpactParams(epsilon=20.0)
        state = MarketState(10.0, 10.0)
        with self.assertRaises(RegularityError) as ctx:
            effective_coeffs(0.49, state, T, MODEL, impact)
        self.assertEqual(ctx.exception.code, "regularity_violation")

        unchecked = effective_coeffs(0.49, state, T, MODEL, impact, check=False)
        self.assertLess(unchecked.denom, impact.delta0)


class TestCoeffJacobians(unittest.TestCase):
    def test_frictionless_jacobian_is_constant(self):
        jac = _jac(60.0, 80.0, impact=FRICTIONLESS)
        self.assertEqual(jac[0, 0, 0], 0.4)
        self.assertEqual(jac[0, 0, 1], 0.0)
        self.assertAlmostEqual(jac[1, 0, 1], 0.1, places=15)
        self.assertEqual(jac[1, 0, 0], 0.0)

    def test_jacobian_against_finite_differences(self):
        s = np.array([60.0, 80.0])
        analytic = _jac(*s)
        for l in range(2):
            numeric = _five_point(lambda x: _sigma(*x), s, l)
            np.testing.assert_allclose(analytic[:, :, l], numeric, rtol=1e-6, atol=1e-10)

    def test_hessian_against_finite_differences(self):
        s = np.array([55.0, 60.0])
        analytic = coeff_jacobians(0.2, MarketState(*s), T, MODEL, IMPACT).hess
        for q in range(2):
            numeric = _five_point(lambda x: _jac(*x, t=0.2), s, q)
            np.testing.assert_allclose(analytic[:, :, :, q], numeric, rtol=1e-5, atol=1e-10)

    def test_hessian_is_symmetric(self):
        hess = coeff_jacobians(0.2, MarketState(55.0, 60.0), T, MODEL, IMPACT).hess
        np.testing.assert_allclose(hess, np.swapaxes(hess, 2, 3), rtol=1e-12, atol=1e-15)

    def test_out_of_band_reduces_to_frictionless(self):
        """s1 above the cap sees no impact, so the derivatives are the GBM ones."""
        band = ImpactParams(epsilon=0.04, floor=1.0, cap=5.0)
        derivs = coeff_jacobians(0.1, MarketState(60.0, 80.0), T, MODEL, band)
        np.testing.assert_allclose(derivs.jac, _jac(60.0, 80.0, impact=FRICTIONLESS), rtol=1e-14, atol=1e-15)
        self.assertFalse(np.any(derivs.hess))

    def test_first_order_only(self):
        full = coeff_jacobians(0.2, MarketState(55.0, 60.0), T, MODEL, IMPACT)
        light = coeff_jacobians(0.2, MarketState(55.0, 60.0), T, MODEL, IMPACT, second_order=False)
        np.testing.assert_array_equal(full.jac, light.jac)
        self.assertFalse(np.any(light.hess))


class TestCorrelatedCoupling(unittest.TestCase):
    """Hedging feedback through asset 2 loaded on its correlated driver."""

    def setUp(self):
        self.impact = ImpactParams(epsilon=0.04, coupling=CORRELATED)
        self.t = 0.1
        self.state = MarketState(60.0, 80.0)

    def _terms(self):
        lam = lambda_bar(self.t, self.state.s1, T, self.impact)
        greeks = margrabe_greeks(self.state, T - self.t, MODEL)
        return lam, greeks.gamma11, greeks.gamma12

    def test_unknown_coupling_rejected(self):
        with self.assertRaises(InvalidParamsError):
            ImpactParams(coupling='sideways')

    def test_frictionless_is_gbm(self):
        frictionless = ImpactParams(epsilon=0.0, coupling=CORRELATED)
        np.testing.assert_array_equal(_sigma(60.0, 80.0, impact=frictionless), _sigma(60.0, 80.0, impact=FRICTIONLESS))

    def test_cross_variation_matches_feedback(self):
        sigma = effective_coeffs(self.t, self.state, T, MODEL, self.impact).sigma_matrix()
        lam, g11, g12 = self._terms()
        den = 1.0 - lam * g11
        s1, s2 = self.state.s1, self.state.s2
        cross = (MODEL.rho * MODEL.sigma1 * MODEL.sigma2 * s1 * s2 + lam * g12 * MODEL.sigma2 ** 2 * s2 ** 2) / den
        var1 = (
            MODEL.sigma1 ** 2 * s1 ** 2
            + MODEL.sigma2 ** 2 * s2 ** 2 * lam ** 2 * g12 ** 2
            + 2.0 * MODEL.rho * MODEL.sigma1 * MODEL.sigma2 * s1 * s2 * lam * g12
        ) / den ** 2
        covariance = sigma @ sigma.T
        self.assertAlmostEqual(covariance[0, 1], cross, delta=1e-12 * abs(cross))
        self.assertAlmostEqual(covariance[0, 0], var1, delta=1e-12 * var1)

    def test_literal_coupling_differs(self):
        literal = _sigma(60.0, 80.0)
        correlated = _sigma(60.0, 80.0, impact=self.impact)
        self.assertGreater(abs(literal[0, 0] - correlated[0, 0]), 1e-6)
        np.testing.assert_array_equal(literal[1], correlated[1])

    def test_jacobian_against_finite_differences(self):
        s = np.array([60.0, 80.0])
        analytic = _jac(*s, impact=self.impact)
        for l in range(2):
            numeric = _five_point(lambda x: _sigma(*x, impact=self.impact), s, l)
            np.testing.assert_allclose(analytic[:, :, l], numeric, rtol=1e-6, atol=1e-10)

    def test_hessian_against_finite_differences(self):
        s = np.array([55.0, 60.0])
        analytic = coeff_jacobians(0.2, MarketState(*s), T, MODEL, self.impact).hess
        for q in range(2):
            numeric = _five_point(lambda x: _jac(*x, t=0.2, impact=self.impact), s, q)
            np.testing.assert_allclose(analytic[:, :, :, q], numeric, rtol=1e-5, atol=1e-10)


class TestPhysicalDrift(unittest.TestCase):
    def test_reduces_to_gbm_without_impact(self):
        drift = physical_drift(0.1, MarketState(60.0, 80.0), T, MODEL, FRICTIONLESS, 0.08, 0.06)
        self.assertAlmostEqual(drift, 0.08 * 60.0, places=12)

    def test_reduces_to_gbm_at_expiry(self):
        drift = physical_drift(T, MarketState(60.0, 80.0), T, MODEL, IMPACT, 0.08, 0.06)
        self.assertAlmostEqual(drift, 0.08 * 60.0, places=12)

    def test_finite_with_impact(self):
        drift = physical_drift(0.1, MarketState(60.0, 80.0), T, MODEL, IMPACT, 0.08, 0.06)
        self.assertTrue(np.isfinite(drift))
        self.assertNotAlmostEqual(drift, 0.08 * 60.0, places=6)


def run_impact_tests():
    """Run all price-impact tests."""
    unittest.main()

if __name__ == '__main__':
    run_impact_tests()
