"""Tests for step noise, the Milstein step and the coupled path simulator."""
import os
import shutil
import tempfile
import unittest

import numpy as np

from src.engine.sde import (
    GridSpec,
    StepNoise,
    identity_jacobian,
    jacobian_step,
    milstein_step,
    noise_from_increments,
    read_path_dump,
    sample_step_noise,
    simulate_coupled_paths,
    write_path_dump,
)
from src.engine.streams import block_count, block_generator, block_ranges
from src.models.impact import FRICTIONLESS, ImpactParams
from src.models.margrabe import MarketState, ModelParams
from src.utils.errors import (
    AllPathsDiscardedError,
    DatasetFileError,
    InvalidParamsError,
)

MODEL = ModelParams(sigma1=0.4, sigma2=0.2, rho=0.5, r=0.05)
IMPACT = ImpactParams(epsilon=0.04)


class TestStreams(unittest.TestCase):
    def test_block_ranges_cover_paths(self):
        ranges = list(block_ranges(5000, 2048))
        self.assertEqual(block_count(5000, 2048), 3)
        self.assertEqual(ranges, [(0, 0, 2048), (1, 2048, 4096), (2, 4096, 5000)])

    def test_block_streams_are_reproducible_and_distinct(self):
        a = block_generator(7, 0).standard_normal(8)
        b = block_generator(7, 0).standard_normal(8)
        c = block_generator(7, 1).standard_normal(8)
        np.testing.assert_array_equal(a, b)
        self.assertFalse(np.array_equal(a, c))


class TestStepNoise(unittest.TestCase):
    def test_single_substep_has_no_area(self):
        """With K = 1 the area vanishes and dW is the scaled normal draw."""
        dt = 0.01
        z = np.random.default_rng(3).standard_normal((2, 1))
        noise = sample_step_noise(np.random.default_rng(3), dt, 1)
        self.assertEqual(noise.a12, 0.0)
        self.assertEqual(noise.dW1, z[0, 0] * np.sqrt(dt))
        self.assertEqual(noise.dW2, z[1, 0] * np.sqrt(dt))

    def test_increments_sum_to_step(self):
        fine = np.random.default_rng(5).standard_normal((2, 16, 10))
        noise = noise_from_increments(fine[0], fine[1], dt=1.0)
        np.testing.assert_array_equal(noise.dW1, fine[0].sum(axis=0))
        np.testing.assert_array_equal(noise.dW2, fine[1].sum(axis=0))

    def test_area_is_antisymmetric(self):
        fine = np.random.default_rng(6).standard_normal((2, 16, 10))
        forward = noise_from_increments(fine[0], fine[1])
        swapped = noise_from_increments(fine[1], fine[0])
        np.testing.assert_array_equal(swapped.a12, -forward.a12)
        np.testing.assert_array_equal(forward.a21, -forward.a12)

    def test_area_moments(self):
        """E[A12] = 0 and Var[A12] = dt^2 (1 - 1/K)."""
        dt, K = 0.01, 256
        rng = np.random.default_rng(11)
        samples = np.concatenate([
            sample_step_noise(rng, dt, K, size=10_000).a12 for _ in range(10)
        ])
        n = samples.size
        self.assertLess(abs(samples.mean()), 4.0 * samples.std() / np.sqrt(n))
        expected = dt ** 2 * (1.0 - 1.0 / K)
        self.assertLess(abs(samples.var() / expected - 1.0), 0.05)

    def test_mismatched_shapes(self):
        with self.assertRaises(InvalidParamsError):
            noise_from_increments(np.zeros((4, 3)), np.zeros((4, 2)))

    def test_bad_step(self):
        with self.assertRaises(InvalidParamsError):
            sample_step_noise(np.random.default_rng(0), 0.0, 4)


class TestMilsteinStep(unittest.TestCase):
    def test_scalar_gbm_step(self):
        """Without impact and correlation, asset 1 follows the scalar Milstein map."""
        model = ModelParams(sigma1=0.4, sigma2=0.2, rho=0.0, r=0.05)
        dt, dw1 = 0.01, 0.07
        noise = StepNoise(dW1=dw1, dW2=-0.03, a12=0.001, dt=dt)
        out = milstein_step(MarketState(60.0, 80.0), noise, 0.0, 0.5, model, FRICTIONLESS)
        expected = 60.0 * (1.0 + 0.05 * dt + 0.4 * dw1 + 0.5 * 0.16 * (dw1 ** 2 - dt))
        self.assertIsInstance(out.s1, float)
        np.testing.assert_allclose(out.s1, expected, rtol=1e-13)

    def test_zero_noise_asset2(self):
        """Zero noise leaves asset 2 with drift and the Ito correction only."""
        dt = 0.01
        noise = StepNoise(dW1=0.0, dW2=0.0, a12=0.0, dt=dt)
        out = milstein_step(MarketState(60.0, 80.0), noise, 0.0, 0.5, MODEL, IMPACT)
        expected = 80.0 * (1.0 + 0.05 * dt) - 0.5 * 0.2 ** 2 * 80.0 * dt
        np.testing.assert_allclose(out.s2, expected, rtol=1e-13)

    def test_needs_step_length(self):
        noise = StepNoise(dW1=0.0, dW2=0.0, a12=0.0)
        with self.assertRaises(InvalidParamsError):
            milstein_step(MarketState(60.0, 80.0), noise, 0.0, 0.5, MODEL, IMPACT)

    def test_strong_order_one(self):
        """Mean absolute error against exact GBM shrinks linearly in dt."""
        T, n_paths, finest = 0.5, 10_000, 64
        rng = np.random.default_rng(2024)
        fine = rng.standard_normal((finest, 2, n_paths)) * np.sqrt(T / finest)
        w1 = fine[:, 0].sum(axis=0)
        w2 = fine[:, 1].sum(axis=0)
        c = np.sqrt(1.0 - MODEL.rho ** 2)
        exact1 = 60.0 * np.exp((MODEL.r - 0.5 * MODEL.sigma1 ** 2) * T + MODEL.sigma1 * w1)
        exact2 = 80.0 * np.exp(
            (MODEL.r - 0.5 * MODEL.sigma2 ** 2) * T + MODEL.sigma2 * (MODEL.rho * w1 + c * w2)
        )

        steps, errors = [8, 16, 32, 64], []
        for n_steps in steps:
            group = finest // n_steps
            dt = T / n_steps
            state = MarketState(np.full(n_paths, 60.0), np.full(n_paths, 80.0))
            for m in range(n_steps):
                chunk = fine[m * group:(m + 1) * group]
                noise = noise_from_increments(chunk[:, 0], chunk[:, 1], dt=dt)
                state = milstein_step(state, noise, m * dt, T, MODEL, FRICTIONLESS)
            errors.append(np.mean(np.abs(state.s1 - exact1) + np.abs(state.s2 - exact2)))

        slope = np.polyfit(np.log(T / np.array(steps)), np.log(errors), 1)[0]
        self.assertGreater(slope, 0.8)
        self.assertLess(slope, 1.2)

    def test_jacobian_step_without_impact(self):
        """Without impact one Jacobian step is the per-asset growth factor."""
        noise = StepNoise(dW1=0.05, dW2=-0.02, a12=0.0003, dt=0.01)
        state = MarketState(60.0, 80.0)
        out = milstein_step(state, noise, 0.0, 0.5, MODEL, FRICTIONLESS)
        jac = jacobian_step(identity_jacobian(), state, noise, 0.0, 0.5, MODEL, FRICTIONLESS)
        np.testing.assert_allclose(jac[0, 0], out.s1 / 60.0, rtol=1e-13)
        np.testing.assert_allclose(jac[1, 1], out.s2 / 80.0, rtol=1e-13)
        self.assertEqual(jac[0, 1], 0.0)
        self.assertEqual(jac[1, 0], 0.0)

    def test_jacobian_step_against_bump(self):
        noise = StepNoise(dW1=0.05, dW2=-0.02, a12=0.0003, dt=0.01)
        s = np.array([58.0, 60.0])
        jac = jacobian_step(identity_jacobian(), MarketState(*s), noise, 0.1, 0.5, MODEL, IMPACT)
        for j in range(2):
            h = 1e-5 * s[j]
            up, down = s.copy(), s.copy()
            up[j] += h
            down[j] -= h
            hi = milstein_step(MarketState(*up), noise, 0.1, 0.5, MODEL, IMPACT)
            lo = milstein_step(MarketState(*down), noise, 0.1, 0.5, MODEL, IMPACT)
            numeric = np.array([hi.s1 - lo.s1, hi.s2 - lo.s2]) / (2.0 * h)
            np.testing.assert_allclose(jac[:, j], numeric, rtol=1e-6, atol=1e-9)


class TestCoupledPaths(unittest.TestCase):
    def setUp(self):
        self.test_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.test_dir)

    def test_frictionless_arms_coincide(self):
        spec = GridSpec(n_paths=500, n_steps=10, levy_substeps=4, seed=1)
        paths = simulate_coupled_paths(MarketState(10.0, 10.0), spec, MODEL, FRICTIONLESS)
        np.testing.assert_array_equal(paths.terminal, paths.terminal_cv)
        self.assertEqual(paths.n_discarded, 0)

    def test_results_do_not_depend_on_workers(self):
        spec = GridSpec(n_paths=3000, n_steps=10, levy_substeps=4, seed=9, block_size=1000)
        start = MarketState(60.0, 80.0)
        serial = simulate_coupled_paths(start, spec, MODEL, IMPACT, workers=1)
        parallel = simulate_coupled_paths(start, spec, MODEL, IMPACT, workers=2)
        np.testing.assert_array_equal(serial.terminal, parallel.terminal)
        np.testing.assert_array_equal(serial.terminal_cv, parallel.terminal_cv)

    def test_asset2_is_martingale_after_discounting(self):
        spec = GridSpec(n_paths=20_000, n_steps=50, levy_substeps=4, seed=3)
        paths = simulate_coupled_paths(MarketState(60.0, 80.0), spec, MODEL, IMPACT)
        s2 = paths.terminal[paths.valid, 1]
        target = 80.0 * np.exp(MODEL.r * spec.T)
        self.assertLess(abs(s2.mean() - target), 3.0 * s2.std(ddof=1) / np.sqrt(s2.size))

    def test_frictionless_jacobian_is_price_ratio(self):
        spec = GridSpec(n_paths=200, n_steps=20, levy_substeps=4, seed=4)
        paths = simulate_coupled_paths(
            MarketState(60.0, 80.0), spec, MODEL, FRICTIONLESS, with_jacobians=True
        )
        np.testing.assert_allclose(paths.jacobian[:, 0, 0], paths.terminal[:, 0] / 60.0, rtol=1e-12)
        np.testing.assert_allclose(paths.jacobian[:, 1, 1], paths.terminal[:, 1] / 80.0, rtol=1e-12)
        np.testing.assert_array_equal(paths.jacobian[:, 0, 1], 0.0)

    def test_jacobian_matches_bumped_paths(self):
        """Common-noise bumps of S(0) reproduce the propagated Jacobian."""
        spec = GridSpec(n_paths=200, n_steps=20, levy_substeps=4, seed=5)
        base = simulate_coupled_paths(MarketState(60.0, 80.0), spec, MODEL, IMPACT, with_jacobians=True)
        s0 = np.array([60.0, 80.0])
        for j in range(2):
            h = 1e-4 * s0[j]
            up, down = s0.copy(), s0.copy()
            up[j] += h
            down[j] -= h
            hi = simulate_coupled_paths(MarketState(*up), spec, MODEL, IMPACT)
            lo = simulate_coupled_paths(MarketState(*down), spec, MODEL, IMPACT)
            ok = base.valid & hi.valid & lo.valid
            numeric = (hi.terminal[ok] - lo.terminal[ok]) / (2.0 * h)
            analytic = base.jacobian[ok][:, :, j]
            np.testing.assert_allclose(analytic.mean(axis=0), numeric.mean(axis=0), rtol=1e-4, atol=1e-8)

    def test_all_paths_discarded(self):
        """Huge impact breaks regularity on every path at the first step."""
        spec = GridSpec(n_paths=20, n_steps=5, levy_substeps=2, seed=0)
        with self.assertLogs('src.engine.sde', level='WARNING'):
            with self.assertRaises(AllPathsDiscardedError):
                simulate_coupled_paths(MarketState(10.0, 10.0), spec, MODEL, ImpactParams(epsilon=20.0))

    def test_invalid_grid(self):
        with self.assertRaises(InvalidParamsError):
            GridSpec(n_steps=0)
        with self.assertRaises(InvalidParamsError):
            GridSpec(t0=1.0, T=0.5)

    def test_path_dump_roundtrip(self):
        spec = GridSpec(n_paths=64, n_steps=5, levy_substeps=2, seed=8)
        paths = simulate_coupled_paths(MarketState(60.0, 80.0), spec, MODEL, IMPACT)
        target = os.path.join(self.test_dir, 'paths.bin')
        write_path_dump(target, paths, spec)

        self.assertEqual(os.path.getsize(target), 36 + 64 * 4 * 8)
        header, rows = read_path_dump(target)
        self.assertEqual(header, {"version": 1, "n_paths": 64, "n_steps": 5, "seed": 8})
        np.testing.assert_array_equal(rows[:, :2], paths.terminal)
        np.testing.assert_array_equal(rows[:, 2:], paths.terminal_cv)

    def test_truncated_path_dump(self):
        spec = GridSpec(n_paths=16, n_steps=3, levy_substeps=2, seed=8)
        paths = simulate_coupled_paths(MarketState(60.0, 80.0), spec, MODEL, IMPACT)
        target = os.path.join(self.test_dir, 'paths.bin')
        write_path_dump(target, paths, spec)
        with open(target, 'rb') as handle:
            raw = handle.read()
        with open(target, 'wb') as handle:
            handle.write(raw[:-8])
        with self.assertRaises(DatasetFileError):
            read_path_dump(target)


def run_sde_tests():
    """Run all simulation engine tests."""
    unittest.main()

if __name__ == '__main__':
    run_sde_tests()
