"""
Tests for the post-processing of pricing run outputs.
"""
import os
import shutil
import tempfile
import unittest

import numpy as np
import pandas as pd

from src.analysis.reports import (
    atm_peaks,
    bench_substeps,
    calculate_statistics,
    check_superlinear,
    ci_scaling,
    excess_nonnegative,
    load_results,
    lva_pivot,
    time_ratios,
)
from src.engine.estimators import write_csv
from src.utils.errors import EXIT_NUMERICAL, NotSuperlinearError


def _lva_frame():
    rows = []
    for s2 in (10.0, 20.0):
        for s1 in (10.0, 20.0, 30.0):
            excess = 0.011 if s1 == s2 else 0.002 / abs(s1 - s2)
            rows.append({'s1': s1, 's2': s2, 'excess': excess, 'std_error': 1e-4})
    return pd.DataFrame(rows)


class TestAnalysisComponents(unittest.TestCase):
    def setUp(self):
        """Set up test environment with temporary directories."""
        self.temp_dir = tempfile.mkdtemp()
        self.results_dir = os.path.join(self.temp_dir, 'results')
        os.makedirs(self.results_dir, exist_ok=True)

    def tearDown(self):
        """Clean up temporary directories."""
        shutil.rmtree(self.temp_dir)

    def test_load_results(self):
        """Result files are grouped by kind and stanza lines are skipped."""
        frame = pd.DataFrame({'value': [1.0, 1.1], 'ci_low': [0.9, 1.0], 'ci_high': [1.1, 1.2]})
        write_csv(frame, os.path.join(self.results_dir, 'price_a.csv'), {'seed': 1})
        write_csv(frame, os.path.join(self.results_dir, 'price_b.csv'), {'seed': 2})
        write_csv(_lva_frame(), os.path.join(self.results_dir, 'lva_grid.csv'), {'seed': 1})

        dfs = load_results(self.results_dir)
        self.assertEqual(len(dfs['price']), 4)
        self.assertEqual(sorted(dfs['price']['run'].unique()), ['price_a', 'price_b'])
        self.assertEqual(len(dfs['lva']), 6)
        self.assertTrue(dfs['bench'].empty)

    def test_lva_pivot_and_peaks(self):
        frame = _lva_frame()
        pivot = lva_pivot(frame)
        self.assertEqual(list(pivot.index), [10.0, 20.0])
        self.assertEqual(list(pivot.columns), [10.0, 20.0, 30.0])

        peaks = atm_peaks(frame)
        self.assertTrue(peaks['atm'].all())
        self.assertEqual(list(peaks['argmax_s1']), [10.0, 20.0])

    def test_excess_nonnegative(self):
        frame = _lva_frame()
        self.assertTrue(excess_nonnegative(frame))
        frame.loc[0, 'excess'] = -1e-3
        self.assertFalse(excess_nonnegative(frame))

    def test_time_ratios(self):
        """Linear cost is not superlinear; quadrupling per doubling is near-quadratic."""
        linear = pd.DataFrame({'n_steps': [100, 200, 400], 'wall_clock': [1.0, 2.0, 4.0]})
        ratios = time_ratios(linear, 'n_steps').dropna()
        self.assertTrue((ratios['size_ratio'] == 2.0).all())
        self.assertFalse(ratios['superlinear'].any())

        quadratic = pd.DataFrame({'n_steps': [200, 100], 'wall_clock': [4.0, 1.0]})
        ratios = time_ratios(quadratic, 'n_steps').dropna()
        self.assertEqual(ratios['time_ratio'].iloc[0], 4.0)
        self.assertTrue(ratios['near_quadratic'].all())

    def test_check_superlinear(self):
        quadratic = pd.DataFrame({'n_steps': [100, 200, 400], 'wall_clock': [1.0, 3.9, 16.2]})
        check_superlinear(time_ratios(quadratic, 'n_steps'))

        flat = pd.DataFrame({'n_steps': [100, 200, 400], 'wall_clock': [1.0, 3.9, 7.0]})
        with self.assertRaises(NotSuperlinearError) as ctx:
            check_superlinear(time_ratios(flat, 'n_steps'))
        self.assertEqual(ctx.exception.context['n_steps'], [400])
        self.assertEqual(ctx.exception.exit_code, EXIT_NUMERICAL)

    def test_bench_substeps(self):
        self.assertEqual([bench_substeps(32, m, 100) for m in (100, 200, 400, 800)], [32, 64, 128, 256])
        self.assertEqual(bench_substeps(3, 150, 100), 5)

    def test_ci_scaling(self):
        n_paths = np.array([1000, 100000, 10000])
        half = 0.01 * np.sqrt(1000 / n_paths)
        frame = pd.DataFrame({'n_paths': n_paths, 'ci_low': 1.0 - half, 'ci_high': 1.0 + half})
        scaling = ci_scaling(frame)
        self.assertEqual(list(scaling['n_paths']), [1000, 10000, 100000])
        np.testing.assert_allclose(scaling['ratio_to_predicted'], 1.0, rtol=1e-9)

    def test_calculate_statistics(self):
        frame = pd.DataFrame({
            'n_paths': [100, 100, 1000],
            'value': [1.0, 1.2, 1.1],
            'ci_low': [0.9, 1.1, 1.05],
            'ci_high': [1.1, 1.3, 1.15],
            'vr_factor': [5.0, 7.0, 6.0],
            'wall_clock': [0.1, 0.3, 1.0],
        })
        stats = calculate_statistics(frame)
        self.assertAlmostEqual(stats.loc[100, 'mean_value'], 1.1)
        self.assertAlmostEqual(stats.loc[100, 'mean_ci_length'], 0.2)
        self.assertAlmostEqual(stats.loc[1000, 'mean_vr_factor'], 6.0)


def run_analysis_tests():
    """Run all analysis tests."""
    unittest.main()

if __name__ == '__main__':
    run_analysis_tests()
