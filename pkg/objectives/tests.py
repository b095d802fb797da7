import numpy as np
from django.test import SimpleTestCase

from data.dataset import Dataset
from lab.exceptions import PreconditionError
from networks.gradcheck import central_difference, max_relative_error
from networks.mlp import HeadKind, MlpSpec, ParamVector, init_params
from objectives.losses import (
    Categorical,
    Gaussian,
    NoiseModel,
    distill_loss_classification,
    distill_loss_regression,
    log_likelihood_grad,
    log_prior_grad,
    log_softmax,
    log_softmax_backward,
    nll_data_classification,
    nll_data_regression,
    posterior_grad_estimate,
)


def _random_simplex(rng, k):
    return rng.dirichlet(np.ones(k))


class LogSoftmaxTests(SimpleTestCase):
    """Test log-softmax"""

    def test_symmetric_logits(self):
        """Test that equal logits give a uniform distribution"""
        np.testing.assert_allclose(log_softmax([0.0, 0.0]), np.log([0.5, 0.5]), rtol=1e-15)

    def test_large_logits_do_not_overflow(self):
        """Test log-softmax with very large logits"""
        out = log_softmax([1000.0, 0.0])
        self.assertAlmostEqual(out[0], 0.0, places=12)
        self.assertAlmostEqual(out[1], -1000.0, places=9)

    def test_normalisation(self):
        """Test that log-softmax probabilities sum to one"""
        rng = np.random.default_rng(0)
        for _ in range(100):
            self.assertAlmostEqual(np.exp(log_softmax(rng.normal(size=5) * 4)).sum(), 1.0, delta=1e-12)

    def test_categorical_rejects_unnormalised(self):
        """Test that an unnormalised categorical is rejected"""
        Categorical(log_softmax([1.0, 2.0, 3.0]))
        with self.assertRaises(PreconditionError):
            Categorical(np.array([0.0, 0.0]))

    def test_gaussian_needs_finite_fields(self):
        """Test that a Gaussian needs finite mean and variance"""
        self.assertAlmostEqual(Gaussian(0.0, np.log(4.0)).std, 2.0)
        with self.assertRaises(PreconditionError):
            Gaussian(np.inf, 0.0)


class LikelihoodTests(SimpleTestCase):
    """Test per-example likelihoods"""

    def test_classification_nll(self):
        """Test the classification NLL"""
        self.assertAlmostEqual(nll_data_classification(np.full(10, -np.log(10)), 3), 2.302585, places=6)
        self.assertEqual(nll_data_classification(np.array([0.0, -np.inf]), 0), 0.0)
        self.assertAlmostEqual(nll_data_classification(np.log([0.8, 0.2]), 1), -np.log(0.2))

    def test_classification_label_range(self):
        """Test that labels outside 0..K-1 are rejected"""
        with self.assertRaises(PreconditionError):
            nll_data_classification(np.log([0.5, 0.5]), 2)

    def test_regression_nll(self):
        """Test the Gaussian regression NLL"""
        self.assertAlmostEqual(nll_data_regression(1.0, 1.0, NoiseModel(1.0)), 0.918939, places=6)
        toy = nll_data_regression(0.0, 3.0, NoiseModel(1.0 / 9.0))
        self.assertAlmostEqual(toy, 0.5 - 0.5 * np.log(1.0 / 9.0) + 0.5 * np.log(2 * np.pi), places=12)
        self.assertAlmostEqual(toy, 2.5176, places=4)
        self.assertAlmostEqual(nll_data_regression(2.0, 2.0, NoiseModel(1.25)), 0.8074, places=4)

    def test_noise_precision_must_be_positive(self):
        """Test that noise precision must be positive"""
        with self.assertRaises(PreconditionError):
            NoiseModel(0.0)


class PriorTests(SimpleTestCase):
    """Test the Gaussian prior"""

    def test_flat_prior(self):
        """Test that zero prior precision is flat"""
        spec = MlpSpec((1, 1), HeadKind.MEAN_ONLY)
        log_density, grad = log_prior_grad(ParamVector(spec, [3.0, -1.0]), 0.0)
        self.assertEqual(log_density, 0.0)
        self.assertTrue(np.all(grad.values == 0.0))

    def test_hand_values(self):
        """Test the log prior and its gradient by hand"""
        spec = MlpSpec((1, 1), HeadKind.MEAN_ONLY)
        log_density, grad = log_prior_grad(ParamVector(spec, [1.0, 1.0]), 2.0)
        self.assertEqual(log_density, -2.0)
        np.testing.assert_array_equal(grad.values, [-2.0, -2.0])

    def test_gradient_matches_finite_differences(self):
        """Test the prior gradient against central differences"""
        spec = MlpSpec((3, 4, 2))
        params = init_params(spec, np.random.default_rng(1))
        _, grad = log_prior_grad(params, 1.7)
        numeric = central_difference(lambda v: log_prior_grad(params.with_values(v), 1.7)[0], params.values)
        self.assertLessEqual(max_relative_error(grad.values, numeric), 1e-9)


class PosteriorGradTests(SimpleTestCase):
    """Test the rescaled minibatch posterior gradient"""

    def setUp(self):
        rng = np.random.default_rng(12)

        # One small classification and one regression problem
        self.class_spec = MlpSpec((2, 4, 3))
        self.class_data = Dataset(rng.normal(size=(5, 2)), rng.integers(0, 3, size=5), n_classes=3)
        self.reg_spec = MlpSpec((1, 4, 1), HeadKind.MEAN_ONLY)
        self.reg_data = Dataset(rng.normal(size=(5, 1)), rng.normal(size=5))
        self.noise = NoiseModel(2.0)
        self.class_params = init_params(self.class_spec, rng)
        self.reg_params = init_params(self.reg_spec, rng)

    def _full_gradient(self, spec, params, data, noise):
        _, lik = log_likelihood_grad(spec, params, data.inputs, data.targets, noise)
        _, prior = log_prior_grad(params, 0.5)
        return prior.values + lik.values

    def test_full_batch_has_no_rescaling(self):
        """Test that a full batch uses the plain gradient"""
        for spec, params, data, noise in (
            (self.class_spec, self.class_params, self.class_data, None),
            (self.reg_spec, self.reg_params, self.reg_data, self.noise),
        ):
            estimate = posterior_grad_estimate(spec, params, data, len(data), 0.5, noise)
            np.testing.assert_allclose(estimate.values, self._full_gradient(spec, params, data, noise), rtol=1e-12)

    def test_size_one_minibatches_average_to_full_gradient(self):
        """Test that size-one minibatch estimates average to the full gradient"""
        for spec, params, data, noise in (
            (self.class_spec, self.class_params, self.class_data, None),
            (self.reg_spec, self.reg_params, self.reg_data, self.noise),
        ):
            estimates = [
                posterior_grad_estimate(spec, params, data.take([i]), len(data), 0.5, noise).values
                for i in range(len(data))
            ]
            np.testing.assert_allclose(
                np.mean(estimates, axis=0), self._full_gradient(spec, params, data, noise), rtol=1e-10, atol=1e-12
            )

    def test_zero_residual_stationary_point(self):
        """Test that a perfect fit with a flat prior is stationary"""
        spec = MlpSpec((1, 1), HeadKind.MEAN_ONLY)
        params = ParamVector(spec, [0.0, 2.5])
        data = Dataset(np.zeros((4, 1)), np.full(4, 2.5))
        grad = posterior_grad_estimate(spec, params, data, 4, 0.0, NoiseModel(1.0))
        self.assertTrue(np.all(grad.values == 0.0))

    def test_log_likelihood_gradient_matches_finite_differences(self):
        """Test the likelihood gradient against central differences"""
        for spec, params, data, noise in (
            (self.class_spec, self.class_params, self.class_data, None),
            (self.reg_spec, self.reg_params, self.reg_data, self.noise),
        ):
            _, analytic = log_likelihood_grad(spec, params, data.inputs, data.targets, noise)
            numeric = central_difference(
                lambda v: log_likelihood_grad(spec, params.with_values(v), data.inputs, data.targets, noise)[0],
                params.values,
            )
            self.assertLessEqual(max_relative_error(analytic.values, numeric), 1e-6)

    def test_minibatch_larger_than_dataset_rejected(self):
        """Test that a minibatch larger than N is rejected"""
        with self.assertRaises(PreconditionError):
            posterior_grad_estimate(self.class_spec, self.class_params, self.class_data, 3, 1.0)


class DistillClassificationTests(SimpleTestCase):
    """Test the classification distillation loss"""

    def test_matching_student_leaves_entropy(self):
        """Test that a matching student leaves only the teacher entropy"""
        p = np.array([0.2, 0.5, 0.3])
        loss, _ = distill_loss_classification(p, np.log(p))
        self.assertAlmostEqual(loss, -np.sum(p * np.log(p)), places=14)

    def test_one_hot_teacher(self):
        """Test the loss against a one-hot teacher"""
        beta = log_softmax([0.3, -1.0, 2.0])
        loss, grad = distill_loss_classification(np.array([0.0, 1.0, 0.0]), beta)
        self.assertAlmostEqual(loss, -beta[1])
        np.testing.assert_array_equal(grad, [-0.0, -1.0, -0.0])

    def test_uniform_student(self):
        """Test the loss of a uniform student"""
        loss, grad = distill_loss_classification(np.array([0.3, 0.7]), np.log([0.5, 0.5]))
        self.assertAlmostEqual(loss, np.log(2.0), places=14)
        np.testing.assert_allclose(grad, [-0.3, -0.7])

    def test_non_simplex_teacher_rejected(self):
        """Test that a teacher outside the simplex is rejected"""
        with self.assertRaises(PreconditionError):
            distill_loss_classification(np.array([0.6, 0.6]), np.log([0.5, 0.5]))

    def test_gibbs_inequality(self):
        """Test that the loss is never below the teacher entropy"""
        rng = np.random.default_rng(3)
        for _ in range(500):
            p, q = _random_simplex(rng, 4), _random_simplex(rng, 4)
            cross, _ = distill_loss_classification(p, np.log(q))
            entropy, _ = distill_loss_classification(p, np.log(p))
            kl = np.sum(p * (np.log(p) - np.log(q)))
            self.assertAlmostEqual(cross - entropy, kl, places=10)
            self.assertGreaterEqual(cross - entropy, -1e-12)

    def test_logit_gradient_is_student_minus_teacher(self):
        """Test that the logit gradient is q - p"""
        rng = np.random.default_rng(4)
        for _ in range(1000):
            p = _random_simplex(rng, 5)
            logits = rng.normal(size=5)
            beta = log_softmax(logits)
            _, dbeta = distill_loss_classification(p, beta)
            analytic = log_softmax_backward(beta, dbeta)
            np.testing.assert_allclose(analytic, np.exp(beta) - p, atol=1e-14)

            numeric = central_difference(lambda z: distill_loss_classification(p, log_softmax(z))[0], logits)
            self.assertLessEqual(max_relative_error(analytic, numeric), 1e-8)


class DistillRegressionTests(SimpleTestCase):
    """Test the regression distillation loss"""

    def test_per_sample_optimum(self):
        """Test that the gradient vanishes at the teacher mean and noise log-variance"""
        noise = NoiseModel(1.25)
        _, dmu, dalpha = distill_loss_regression(0.7, 0.7, np.log(1.0 / 1.25), noise)
        self.assertEqual(dmu, 0.0)
        self.assertAlmostEqual(dalpha, 0.0, places=15)

    def test_hand_arithmetic(self):
        """Test the regression loss and gradients by hand"""
        loss, dmu, dalpha = distill_loss_regression(1.0, 0.0, 0.0, NoiseModel(1.0))
        self.assertEqual((loss, dmu, dalpha), (1.0, -1.0, -0.5))

    def test_gradients_match_finite_differences(self):
        """Test the regression gradients against central differences"""
        rng = np.random.default_rng(5)
        for _ in range(1000):
            f, mu, alpha = rng.normal(size=3) * np.array([1.0, 1.0, 0.5])
            noise = NoiseModel(float(rng.uniform(0.5, 2.0)))
            _, dmu, dalpha = distill_loss_regression(f, mu, alpha, noise)
            numeric = central_difference(
                lambda v: distill_loss_regression(f, v[0], v[1], noise)[0], np.array([mu, alpha])
            )
            self.assertLessEqual(max_relative_error([dmu, dalpha], numeric), 1e-8)

    def test_grid_minimum_at_teacher_mean_and_noise_log_variance(self):
        """Test that a grid search finds the minimum at the teacher mean and noise log-variance"""
        f, noise = 0.4, NoiseModel(2.0)
        mus = np.linspace(-1.0, 2.0, 61)
        alphas = np.linspace(-3.0, 1.0, 81)
        mu_grid, alpha_grid = np.meshgrid(mus, alphas, indexing="ij")
        losses = distill_loss_regression(f, mu_grid, alpha_grid, noise)[0]
        i, j = np.unravel_index(np.argmin(losses), losses.shape)
        self.assertAlmostEqual(mus[i], f, delta=0.05)
        self.assertAlmostEqual(alphas[j], -np.log(2.0), delta=0.05)
