"""
Full-scale reproduction checks. Slow (minutes on four cores), so they only run
with FLMM_ACCEPTANCE=1 in the environment.
"""
import os
import unittest

import numpy as np

from src.analysis.reports import atm_peaks, excess_nonnegative
from src.engine.estimators import delta_estimate, lva_table, price_estimate, square_grid
from src.engine.sde import GridSpec
from src.models.impact import CORRELATED, ImpactParams
from src.models.margrabe import MarketState, ModelParams

ENABLED = os.environ.get('FLMM_ACCEPTANCE') == '1'
WORKERS = int(os.environ.get('FLMM_WORKERS', '4'))
MODEL = ModelParams(sigma1=0.4, sigma2=0.2, rho=0.5, r=0.05)
IMPACT = ImpactParams(epsilon=0.04, beta=100.0)
CORRELATED_IMPACT = ImpactParams(epsilon=0.04, beta=100.0, coupling=CORRELATED)


@unittest.skipUnless(ENABLED, "set FLMM_ACCEPTANCE=1 to run full-scale checks")
class TestReproduction(unittest.TestCase):
    def test_reference_price_bracketed_by_couplings(self):
        """The published reference band lies between the literal and correlated couplings."""
        spec = GridSpec(n_paths=100_000, n_steps=100, levy_substeps=32, seed=20240101)
        start = MarketState(60.0, 80.0)
        literal = price_estimate(start, 0.5, MODEL, IMPACT, spec, workers=WORKERS)
        correlated = price_estimate(start, 0.5, MODEL, CORRELATED_IMPACT, spec, workers=WORKERS)
        self.assertGreaterEqual(literal.ci_low, 1.00128)
        self.assertLessEqual(correlated.ci_high, 1.0014)
        for est in (literal, correlated):
            self.assertGreaterEqual(est.ci_length, 0.6e-4)
            self.assertLessEqual(est.ci_length, 2.6e-4)

    def test_atm_delta_excesses_cancel(self):
        """Along the diagonal s (Delta1 + Delta2) tracks the Margrabe price, so the excesses offset."""
        spec = GridSpec(n_paths=100_000, n_steps=100, levy_substeps=32, seed=20240101)
        est = delta_estimate(MarketState(10.0, 10.0), 0.5, MODEL, IMPACT, spec, workers=WORKERS)
        bound = 3.0 * np.hypot(est.std_error1, est.std_error2)
        self.assertLess(abs(est.excess1 + est.excess2), bound)

    def test_liquidity_premium_grid(self):
        spec = GridSpec(n_paths=100_000, n_steps=100, levy_substeps=32, seed=20240101)
        table = lva_table(square_grid([10.0, 20.0, 30.0, 100.0]), 0.5, MODEL, IMPACT, spec, workers=WORKERS)
        self.assertTrue(excess_nonnegative(table))

        atm = table[np.isclose(table['s1'], table['s2'])]
        self.assertTrue((atm['excess'] >= 0.008).all())
        self.assertTrue((atm['excess'] <= 0.022).all())
        self.assertTrue(atm_peaks(table)['atm'].all())


def run_acceptance_tests():
    """Run the full-scale reproduction checks."""
    unittest.main()

if __name__ == '__main__':
    run_acceptance_tests()
