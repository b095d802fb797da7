import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase
from scipy import stats

from data.synthetic import conjugate_gaussian_posterior, gen_conjugate, gen_toy1d, gen_toy2d
from lab.exceptions import DataFormatError, DivergedChainError, PreconditionError
from networks.mlp import HeadKind, MlpSpec, ParamVector
from objectives.losses import NoiseModel
from samplers.chains import (
    ChainConfig,
    ChainKind,
    StepSchedule,
    run_chain,
    run_chains,
    sgd_step,
    sgld_step,
)
from samplers.ensemble import PosteriorEnsemble, load_ensemble, save_ensemble
from samplers.hmc import hamiltonian, hmc_sample, leapfrog


def _gaussian_target(precision):
    precision = np.asarray(precision, dtype=np.float64)
    return (lambda q: -0.5 * float(q @ precision @ q)), (lambda q: -precision @ q)


class StepTests(SimpleTestCase):
    """Test single SGD and SGLD steps"""

    def setUp(self):
        self.spec = MlpSpec((1, 1), HeadKind.MEAN_ONLY)
        self.params = ParamVector(self.spec, [0.5, -1.0])

    def test_schedule(self):
        """Test constant and step-decay schedules"""
        self.assertEqual(StepSchedule.constant(0.1).at(10**6), 0.1)
        decay = StepSchedule(0.1, 0.5, 10)
        self.assertEqual(decay.at(9), 0.1)
        self.assertAlmostEqual(decay.at(25), 0.025, places=15)
        with self.assertRaises(PreconditionError):
            StepSchedule(0.0)

    def test_sgd_zero_gradient(self):
        """Test that SGD with a zero gradient stays put"""
        moved = sgd_step(self.params, ParamVector.zeros(self.spec), 0.3)
        np.testing.assert_array_equal(moved.values, self.params.values)
        with self.assertRaises(PreconditionError):
            sgd_step(self.params, ParamVector.zeros(self.spec), 0.0)

    def test_sgld_without_noise_or_gradient_is_fixed(self):
        """Test that SGLD without noise or gradient stays put"""
        moved = sgld_step(self.params, ParamVector.zeros(self.spec), 0.01, None)
        np.testing.assert_array_equal(moved.values, self.params.values)

    def test_sgld_drift_is_half_step(self):
        """Test that the SGLD drift is eta/2 times the gradient"""
        grad = ParamVector(self.spec, [2.0, 4.0])
        moved = sgld_step(self.params, grad, 0.5, None)
        np.testing.assert_array_equal(moved.values, [1.0, 0.0])

    def test_injected_noise_variance(self):
        """Test that injected noise has variance eta"""
        rng = np.random.default_rng(0)
        eta = 0.01
        zero = ParamVector.zeros(self.spec)
        increments = np.empty((100_000, 2))
        params = zero
        for i in range(len(increments)):
            moved = sgld_step(params, zero, eta, rng)
            increments[i] = moved.values - params.values
            params = moved
        np.testing.assert_allclose(increments.var(axis=0), eta, rtol=0.03)


class ChainConfigTests(SimpleTestCase):
    """Test chain configuration checks"""

    def test_invariants(self):
        """Test that invalid chain lengths are rejected"""
        eta = StepSchedule.constant(0.01)
        for bad in (dict(T=10, B=10), dict(T=10, tau=0), dict(T=10, M=0), dict(T=10, B=-1)):
            with self.assertRaises(PreconditionError):
                ChainConfig(eta, **bad)

    def test_retention_rule(self):
        """Test which iterations are retained after burn-in"""
        config = ChainConfig(StepSchedule.constant(0.01), T=10, B=2, tau=3)
        self.assertEqual([t for t in range(1, 11) if config.retains(t)], [5, 8])
        self.assertEqual(config.retained_count, 2)


class RunChainTests(SimpleTestCase):
    """Test full chains on toy 2D"""

    def setUp(self):
        # 2-3-2 classifier on a non-canonical toy 2D draw
        self.spec = MlpSpec((2, 3, 2))
        self.dataset = gen_toy2d(0)

    def _config(self, **overrides):
        options = dict(eta=StepSchedule.constant(0.01), T=200, B=20, tau=1, M=5, prior_precision=1.0, seed=3)
        options.update(overrides)
        return ChainConfig(**options)

    def test_sample_counts(self):
        """Test the number of retained samples"""
        ensemble = run_chain(ChainKind.SGLD, self.spec, self.dataset, self._config(T=1000, B=20, tau=1))
        self.assertEqual(len(ensemble), 980)
        ensemble = run_chain(ChainKind.SGLD, self.spec, self.dataset, self._config(T=21, B=20))
        self.assertEqual(len(ensemble), 1)
        ensemble = run_chain(ChainKind.SGLD, self.spec, self.dataset, self._config(T=1000, B=100, tau=100))
        self.assertEqual(len(ensemble), 9)

    def test_sgd_returns_point_estimate(self):
        """Test that SGD returns one parameter vector"""
        params = run_chain(ChainKind.SGD, self.spec, self.dataset, self._config())
        self.assertIsInstance(params, ParamVector)
        self.assertEqual(params.spec, self.spec)

    def test_same_seed_is_bit_identical(self):
        """Test that a chain is fixed by its seed"""
        first = run_chain(ChainKind.SGLD, self.spec, self.dataset, self._config())
        second = run_chain(ChainKind.SGLD, self.spec, self.dataset, self._config())
        self.assertEqual(first.stacked().tobytes(), second.stacked().tobytes())

        other = run_chain(ChainKind.SGLD, self.spec, self.dataset, self._config(seed=4))
        self.assertNotEqual(first.stacked().tobytes(), other.stacked().tobytes())

    def test_noise_free_sgld_is_sgd_at_half_step(self):
        """Test that noise-free SGLD matches SGD at half the step"""
        eta = 0.02
        sgld = run_chain(
            ChainKind.SGLD, self.spec, self.dataset, self._config(eta=StepSchedule.constant(eta)), inject_noise=False
        )
        sgd = run_chain(ChainKind.SGD, self.spec, self.dataset, self._config(eta=StepSchedule.constant(0.5 * eta)))
        self.assertEqual(sgld.last.values.tobytes(), sgd.values.tobytes())

    def test_divergence_names_iteration(self):
        """Test that a diverging chain reports its iteration"""
        spec = MlpSpec((1, 20, 1), HeadKind.MEAN_ONLY)
        config = ChainConfig(StepSchedule.constant(100.0), T=2000, M=20, seed=0)
        with np.errstate(all="ignore"), self.assertRaises(DivergedChainError) as ctx:
            run_chain(ChainKind.SGD, spec, gen_toy1d(), config, NoiseModel(1.0 / 9.0))
        self.assertGreaterEqual(ctx.exception.iteration, 1)
        self.assertEqual(ctx.exception.which, "teacher")

    def test_parallel_chains_match_sequential(self):
        """Test that worker threads do not change the merged chains"""
        config = self._config(T=60, B=10, tau=10)
        serial = run_chains(self.spec, self.dataset, config, n_chains=3, workers=1)
        parallel = run_chains(self.spec, self.dataset, config, n_chains=3, workers=3)
        self.assertEqual(len(serial), 15)
        self.assertEqual(serial.stacked().tobytes(), parallel.stacked().tobytes())


class ConjugateOracleTests(SimpleTestCase):
    """SGLD on a model whose bias posterior is Gaussian in closed form"""

    def test_sgld_matches_conjugate_posterior(self):
        """Test SGLD moments against the closed-form posterior"""
        spec = MlpSpec((1, 1), HeadKind.MEAN_ONLY)
        dataset = gen_conjugate(seed=8, n_points=50)
        noise = NoiseModel(1.0)
        mean, var = conjugate_gaussian_posterior(dataset, 1.0, noise)

        config = ChainConfig(StepSchedule.constant(4e-3), T=60_000, B=1_000, tau=20, M=50, prior_precision=1.0, seed=5)
        bias = run_chain(ChainKind.SGLD, spec, dataset, config, noise).stacked()[:, 1]

        standard_error = bias.std(ddof=1) / np.sqrt(len(bias))
        self.assertLess(abs(bias.mean() - mean), 3 * standard_error)
        ratio = bias.var(ddof=1) / var
        self.assertGreaterEqual(ratio, 0.8)
        self.assertLessEqual(ratio, 1.3)


class HmcTests(SimpleTestCase):
    """Test the HMC reference sampler on known targets"""

    def test_tiny_steps_are_always_accepted(self):
        """Test that tiny leapfrog steps are always accepted"""
        log_post, grad = _gaussian_target(np.eye(2))
        ensemble = hmc_sample(log_post, grad, np.zeros(2), 1e-6, 1, 1000, 0, np.random.default_rng(0))
        self.assertGreaterEqual(ensemble.acceptance_rate, 0.999)
        self.assertEqual(len(ensemble), 1000)

    def test_correlated_gaussian_moments(self):
        """Mean within 3 standard errors of zero and every covariance entry within 5%."""
        covariance = np.array([[1.0, 0.5], [0.5, 1.0]])
        log_post, grad = _gaussian_target(np.linalg.inv(covariance))
        ensemble = hmc_sample(log_post, grad, np.zeros(2), 0.29, 20, 40_000, 500, np.random.default_rng(1))
        samples = ensemble.stacked()

        standard_error = samples.std(axis=0, ddof=1) / np.sqrt(len(samples))
        self.assertTrue(np.all(np.abs(samples.mean(axis=0)) < 3 * standard_error))
        # atol only matters for entries near zero; none of these are
        np.testing.assert_allclose(np.cov(samples, rowvar=False), covariance, rtol=0.05, atol=1e-3)

    def test_energy_error_is_second_order(self):
        """Test that halving the step quarters the energy error"""
        log_post, grad = _gaussian_target(np.eye(1))
        q0, p0 = np.array([1.0]), np.array([0.5])
        start = hamiltonian(log_post, q0, p0)

        drift = []
        for step, n_steps in ((0.1, 20), (0.05, 40)):
            q, p = leapfrog(q0, p0, grad, step, n_steps)
            drift.append(abs(hamiltonian(log_post, q, p) - start))
        self.assertAlmostEqual(drift[0] / drift[1], 4.0, delta=0.3)

    def test_non_finite_proposals_are_rejected(self):
        """Test that proposals with infinite energy are rejected"""
        def log_post(q):
            return -0.5 * float(q @ q) if np.all(np.abs(q) < 1.0) else -np.inf

        ensemble = hmc_sample(log_post, lambda q: -q, np.zeros(1), 2.0, 3, 500, 0, np.random.default_rng(2))
        self.assertTrue(np.all(np.abs(ensemble.stacked()) < 1.0))
        self.assertLess(ensemble.acceptance_rate, 1.0)

    def test_ks_against_standard_normal(self):
        """Test HMC draws against N(0, 1) with a KS test"""
        log_post, grad = _gaussian_target(np.eye(1))
        ensemble = hmc_sample(log_post, grad, np.zeros(1), 0.3, 5, 2000, 100, np.random.default_rng(3), thin=2)
        result = stats.kstest(ensemble.stacked()[:, 0], "norm")
        self.assertGreater(result.pvalue, 0.01)

    def test_preconditions(self):
        """Test that bad step sizes and leapfrog counts are rejected"""
        log_post, grad = _gaussian_target(np.eye(1))
        with self.assertRaises(PreconditionError):
            hmc_sample(log_post, grad, np.zeros(1), 0.0, 1, 10, 0, np.random.default_rng(0))
        with self.assertRaises(PreconditionError):
            hmc_sample(log_post, grad, np.zeros(1), 0.1, 0, 10, 0, np.random.default_rng(0))


class EnsembleTests(SimpleTestCase):
    """Test posterior ensembles and their checkpoints"""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.dir = Path(self.tmp.name)
        # Four random 2-3-2 samples
        self.spec = MlpSpec((2, 3, 2))
        rng = np.random.default_rng(0)
        self.ensemble = PosteriorEnsemble(
            [ParamVector(self.spec, rng.normal(size=17)) for _ in range(4)], self.spec
        )

    def test_checkpoint_restores_samples(self):
        """Test that an ensemble checkpoint restores every sample"""
        path = save_ensemble(self.dir / "teacher.bdke", self.ensemble)
        restored = load_ensemble(path)
        self.assertEqual(restored.spec, self.spec)
        self.assertEqual(restored.stacked().tobytes(), self.ensemble.stacked().tobytes())

    def test_trailing_bytes_rejected(self):
        """Test that trailing bytes are rejected"""
        path = save_ensemble(self.dir / "teacher.bdke", self.ensemble)
        with open(path, "ab") as handle:
            handle.write(b"\x00")
        with self.assertRaises(DataFormatError):
            load_ensemble(path)

    def test_bad_magic_rejected(self):
        """Test that a wrong ensemble magic is rejected"""
        path = self.dir / "bad.bdke"
        path.write_bytes(b"XXXX\x00\x00\x00\x00")
        with self.assertRaises(DataFormatError):
            load_ensemble(path)

    def test_empty_ensemble_cannot_predict(self):
        """Test that an empty ensemble cannot be stacked"""
        with self.assertRaises(PreconditionError):
            PosteriorEnsemble([], self.spec).stacked()

    def test_merge_rejects_mixed_specs(self):
        """Test that ensembles of different specs cannot merge"""
        other = PosteriorEnsemble([ParamVector.zeros(MlpSpec((2, 4, 2)))], MlpSpec((2, 4, 2)))
        with self.assertRaises(PreconditionError):
            PosteriorEnsemble.merge([self.ensemble, other])
