import tempfile
from pathlib import Path

import numpy as np
import pandas as pd
from django.test import SimpleTestCase

from data.dataset import ColumnStats, Dataset
from evaluation.grids import (
    CATEGORICAL,
    Grid2D,
    GridGeometry,
    kl_grid,
    predictive_band,
    predictive_grid,
    read_grid_csv,
    sidecar_path,
    write_grid_csv,
)
from evaluation.metrics import (
    MetricsReport,
    aggregate_reports,
    classification_reports,
    misclass_rate,
    test_loglik_class,
    test_loglik_reg,
    test_rmse,
)
from evaluation.predictive import (
    EnsemblePredictor,
    StudentPredictor,
    ensemble_predict_class,
    ensemble_predict_reg,
)
from lab.exceptions import PreconditionError, ShapeError
from networks.mlp import HeadKind, MlpSpec, ParamVector, forward, init_params
from objectives.losses import HALF_LOG_2PI, NoiseModel, log_softmax, nll_data_regression
from samplers.ensemble import PosteriorEnsemble


def _bias_only_classifier(spec, logits):
    """A classifier that ignores its input and always outputs the given logits."""
    params = ParamVector.zeros(spec)
    params.layers()[-1][1][:] = logits
    return params


def _constant_regressor(value, spec=MlpSpec((1, 1), HeadKind.MEAN_ONLY)):
    return ParamVector(spec, [0.0, value])


def _constant_student(mu, alpha):
    spec = MlpSpec((1, 2), HeadKind.MEAN_LOGVAR)
    return ParamVector(spec, [0.0, 0.0, mu, alpha])


class EnsemblePredictTests(SimpleTestCase):
    """Test ensemble predictive distributions"""

    def setUp(self):
        self.rng = np.random.default_rng(0)
        self.spec = MlpSpec((2, 3, 3))

    def test_single_sample_is_plain_softmax(self):
        """Test that a one-sample ensemble is the plain softmax"""
        theta = init_params(self.spec, self.rng)
        x = self.rng.normal(size=2)
        predictive = ensemble_predict_class(self.spec, PosteriorEnsemble.single(theta), x)
        expected = log_softmax(forward(self.spec, theta, x[None, :])[0])[0]
        np.testing.assert_allclose(predictive.log_probs, expected, atol=1e-14)

    def test_opposite_confident_models_average_to_half(self):
        """Test that two opposite confident models average to one half"""
        spec = MlpSpec((2, 2))
        ensemble = PosteriorEnsemble(
            [_bias_only_classifier(spec, [800.0, 0.0]), _bias_only_classifier(spec, [0.0, 800.0])], spec
        )
        predictive = ensemble_predict_class(spec, ensemble, np.zeros(2))
        np.testing.assert_allclose(predictive.probs, [0.5, 0.5], atol=1e-12)

    def test_matches_brute_force_average(self):
        """Test against a brute-force average of probabilities"""
        samples = [init_params(self.spec, self.rng) for _ in range(3)]
        x = self.rng.normal(size=(4, 2))
        predictive = ensemble_predict_class(self.spec, PosteriorEnsemble(samples, self.spec), x)
        brute = np.mean([np.exp(log_softmax(forward(self.spec, s, x)[0])) for s in samples], axis=0)
        np.testing.assert_allclose(predictive.probs, brute, atol=1e-12)
        np.testing.assert_allclose(predictive.probs.sum(axis=1), 1.0, atol=1e-10)

    def test_empty_ensemble_rejected(self):
        """Test that an empty ensemble cannot predict"""
        with self.assertRaises(PreconditionError):
            ensemble_predict_class(self.spec, PosteriorEnsemble([], self.spec), np.zeros(2))
        with self.assertRaises(PreconditionError):
            ensemble_predict_reg(self.spec, PosteriorEnsemble([], self.spec), np.zeros(2), NoiseModel(1.0))

    def test_flat_samples_use_the_given_spec(self):
        """An ensemble of bare vectors is read with the spec passed in."""
        samples = [init_params(self.spec, self.rng) for _ in range(3)]
        x = self.rng.normal(size=(4, 2))
        typed = ensemble_predict_class(self.spec, PosteriorEnsemble(samples, self.spec), x)
        flat = ensemble_predict_class(self.spec, PosteriorEnsemble([s.values for s in samples]), x)
        np.testing.assert_array_equal(flat.log_probs, typed.log_probs)

        spec = MlpSpec((1, 1), HeadKind.MEAN_ONLY)
        mean, std = ensemble_predict_reg(spec, PosteriorEnsemble([np.array([0.0, 2.0])]), [0.3], NoiseModel(4.0))
        self.assertEqual((mean, std), (2.0, 0.5))

    def test_spec_disagreements_rejected(self):
        """Test that samples and specs that disagree are rejected"""
        samples = [init_params(self.spec, self.rng) for _ in range(2)]
        with self.assertRaises(ShapeError):
            ensemble_predict_class(MlpSpec((2, 4, 3)), PosteriorEnsemble(samples, self.spec), np.zeros(2))
        # 2-3-3 vectors do not fit a 2-4-3 network
        with self.assertRaises(ShapeError):
            ensemble_predict_class(MlpSpec((2, 4, 3)), PosteriorEnsemble([s.values for s in samples]), np.zeros(2))
        with self.assertRaises(PreconditionError):
            EnsemblePredictor(PosteriorEnsemble([s.values for s in samples]))

    def test_chunked_average_matches_single_pass(self):
        """Accumulating over sample chunks gives the all-at-once average."""
        ensemble = PosteriorEnsemble([init_params(self.spec, self.rng) for _ in range(7)], self.spec)
        x = self.rng.normal(size=(5, 2))
        labels = [0, 1, 2, 0, 1]
        whole = EnsemblePredictor(ensemble, sample_chunk=7)
        for chunk in (1, 2, 3):
            chunked = EnsemblePredictor(ensemble, sample_chunk=chunk)
            np.testing.assert_allclose(chunked.predict_class(x), whole.predict_class(x), rtol=1e-12, atol=1e-14)
            np.testing.assert_allclose(
                chunked.log_density_class(x, labels), whole.log_density_class(x, labels), rtol=1e-12, atol=1e-14
            )
        with self.assertRaises(PreconditionError):
            EnsemblePredictor(ensemble, sample_chunk=0)

    def test_regression_single_component(self):
        """Test a one-component regression mixture"""
        spec = MlpSpec((1, 1), HeadKind.MEAN_ONLY)
        mean, std = ensemble_predict_reg(spec, PosteriorEnsemble.single(_constant_regressor(2.0)), [0.3], NoiseModel(4.0))
        self.assertEqual(mean, 2.0)
        self.assertEqual(std, np.sqrt(0.25))

    def test_two_point_mixture(self):
        """Test the std of a two-point mixture with almost no noise"""
        spec = MlpSpec((1, 1), HeadKind.MEAN_ONLY)
        ensemble = PosteriorEnsemble([_constant_regressor(-1.0), _constant_regressor(1.0)], spec)
        mean, std = ensemble_predict_reg(spec, ensemble, [0.0], NoiseModel(1e12))
        self.assertEqual(mean, 0.0)
        self.assertAlmostEqual(std, 1.0, places=6)

    def test_mixture_moments_match_sampling(self):
        """Test mixture mean and variance against Monte Carlo draws"""
        spec = MlpSpec((1, 1), HeadKind.MEAN_ONLY)
        f = self.rng.normal(size=5) * 2.0
        noise = NoiseModel(0.7)
        ensemble = PosteriorEnsemble([_constant_regressor(v) for v in f], spec)
        mean, std = ensemble_predict_reg(spec, ensemble, [0.0], noise)

        draws = f[self.rng.integers(0, 5, size=1_000_000)] + self.rng.normal(size=1_000_000) / np.sqrt(0.7)
        n = len(draws)
        self.assertLess(abs(draws.mean() - mean), 3 * draws.std() / np.sqrt(n))
        # std of the sample variance for a distribution with finite fourth moment
        var_se = np.sqrt(np.var((draws - draws.mean()) ** 2) / n)
        self.assertLess(abs(draws.var() - std ** 2), 3 * var_se)

    def test_mixture_variance_never_below_noise(self):
        """Test that the mixture std never drops below the noise std"""
        spec = MlpSpec((1, 4, 1), HeadKind.MEAN_ONLY)
        noise = NoiseModel(2.0)
        ensemble = PosteriorEnsemble([init_params(spec, self.rng) for _ in range(6)], spec)
        _, std = ensemble_predict_reg(spec, ensemble, self.rng.normal(size=(50, 1)), noise)
        self.assertTrue(np.all(std >= np.sqrt(noise.variance)))


class LogLikelihoodTests(SimpleTestCase):
    """Test test-set metrics"""

    def setUp(self):
        self.spec = MlpSpec((1, 3))

    def test_perfect_and_uniform_classifiers(self):
        """Test log-likelihood of a perfect and a uniform classifier"""
        test_set = Dataset(np.zeros((4, 1)), [0, 0, 0, 0], n_classes=3)
        perfect = StudentPredictor(_bias_only_classifier(self.spec, [1000.0, 0.0, 0.0]))
        self.assertEqual(test_loglik_class(perfect, test_set).value, 0.0)

        spec = MlpSpec((1, 10))
        uniform = EnsemblePredictor.plugin(ParamVector.zeros(spec))
        test_set = Dataset(np.zeros((3, 1)), [1, 5, 9], n_classes=10)
        self.assertAlmostEqual(test_loglik_class(uniform, test_set).value, -np.log(10), places=14)

    def test_hand_built_cases(self):
        """Test log-likelihood and error rate on hand-built probabilities"""
        probs = np.array([0.5, 0.3, 0.2])
        predictor = StudentPredictor(_bias_only_classifier(self.spec, np.log(probs)))
        test_set = Dataset(np.zeros((3, 1)), [0, 1, 2], n_classes=3)
        self.assertAlmostEqual(test_loglik_class(predictor, test_set).value, np.mean(np.log(probs)), places=14)

        labels = [0, 0, 1, 0]
        self.assertEqual(misclass_rate(predictor, Dataset(np.zeros((4, 1)), labels, n_classes=3)).value, 0.25)

    def test_misclassification_extremes(self):
        """Test error rates of 0 and 0.5"""
        always_zero = StudentPredictor(_bias_only_classifier(MlpSpec((1, 2)), [1.0, 0.0]))
        balanced = Dataset(np.zeros((6, 1)), [0, 1, 0, 1, 0, 1], n_classes=2)
        self.assertEqual(misclass_rate(always_zero, balanced).value, 0.5)
        self.assertEqual(misclass_rate(always_zero, Dataset(np.zeros((3, 1)), [0, 0, 0], n_classes=2)).value, 0.0)

    def test_ties_go_to_lowest_class(self):
        """Test that argmax ties go to the lowest class"""
        tied = EnsemblePredictor.plugin(ParamVector.zeros(MlpSpec((1, 3))))
        self.assertEqual(misclass_rate(tied, Dataset(np.zeros((2, 1)), [0, 0], n_classes=3)).value, 0.0)

    def test_single_pass_classification_reports(self):
        """misclass_rate and test_loglik from one predictive pass agree with the separate metrics."""
        spec = MlpSpec((2, 4, 3))
        rng = np.random.default_rng(5)
        predictor = EnsemblePredictor(PosteriorEnsemble([init_params(spec, rng) for _ in range(4)], spec))
        test_set = Dataset(rng.normal(size=(9, 2)), rng.integers(0, 3, size=9), n_classes=3)
        misclass, loglik = classification_reports(predictor, test_set)
        self.assertEqual(misclass.name, "misclass_rate")
        self.assertEqual(misclass.value, misclass_rate(predictor, test_set).value)
        self.assertEqual(loglik.name, "test_loglik")
        self.assertAlmostEqual(loglik.value, test_loglik_class(predictor, test_set).value, places=12)

    def test_single_model_regression_is_negated_nll(self):
        """Test that a single regressor scores its negated NLL"""
        noise = NoiseModel(0.5)
        test_set = Dataset(np.zeros((3, 1)), [0.5, -1.0, 2.0])
        predictor = EnsemblePredictor.plugin(_constant_regressor(0.2), noise)
        expected = -np.mean(nll_data_regression(0.2, test_set.targets, noise))
        self.assertAlmostEqual(test_loglik_reg(predictor, test_set).value, expected, places=14)

    def test_replicated_model_matches_single(self):
        """Test that replicating one sample does not change the score"""
        noise = NoiseModel(0.5)
        spec = MlpSpec((1, 4, 1), HeadKind.MEAN_ONLY)
        theta = init_params(spec, np.random.default_rng(1))
        test_set = Dataset(np.random.default_rng(2).normal(size=(7, 1)), np.random.default_rng(3).normal(size=7))
        single = test_loglik_reg(EnsemblePredictor.plugin(theta, noise), test_set).value
        replicated = test_loglik_reg(EnsemblePredictor(PosteriorEnsemble([theta] * 5, spec), noise), test_set).value
        self.assertEqual(single, replicated)

    def test_far_apart_components(self):
        """Test a mixture whose components are far apart"""
        noise = NoiseModel(1.0)
        spec = MlpSpec((1, 1), HeadKind.MEAN_ONLY)
        ensemble = PosteriorEnsemble([_constant_regressor(0.0), _constant_regressor(100.0)], spec)
        value = test_loglik_reg(EnsemblePredictor(ensemble), Dataset(np.zeros((1, 1)), [0.0]), noise).value
        self.assertAlmostEqual(value, -HALF_LOG_2PI - np.log(2.0), places=12)

    def test_student_density(self):
        """Test the student log density at its own mean"""
        predictor = StudentPredictor(_constant_student(1.5, 0.0))
        value = test_loglik_reg(predictor, Dataset(np.zeros((2, 1)), [1.5, 1.5])).value
        self.assertAlmostEqual(value, -0.5 * np.log(2 * np.pi), places=14)

    def test_standardised_targets_report_original_units(self):
        """Test that standardised targets are scored in original units"""
        stats = ColumnStats(np.array([10.0]), np.array([4.0]))
        test_set = Dataset(np.zeros((1, 1)), [0.0], target_stats=stats)
        predictor = StudentPredictor(_constant_student(0.0, 0.0))
        self.assertAlmostEqual(test_loglik_reg(predictor, test_set).value, -HALF_LOG_2PI - np.log(4.0), places=14)

    def test_rmse_in_original_units(self):
        """Test that RMSE is reported in original units"""
        stats = ColumnStats(np.array([10.0]), np.array([4.0]))
        test_set = Dataset(np.zeros((2, 1)), [1.0, -1.0], target_stats=stats)
        predictor = EnsemblePredictor.plugin(_constant_regressor(0.0), NoiseModel(1.0))
        self.assertAlmostEqual(test_rmse(predictor, test_set).value, 4.0, places=14)

    def test_mean_only_student_rejected(self):
        """Test that a mean-only student is rejected"""
        with self.assertRaises(PreconditionError):
            StudentPredictor(_constant_regressor(0.0))


class AggregateTests(SimpleTestCase):
    """Test aggregation over trials"""

    def test_mean_and_standard_error(self):
        """Test mean and standard error over trials"""
        reports = [MetricsReport("kl", v) for v in (1.0, 2.0, 3.0, 4.0)]
        combined = aggregate_reports(reports)
        self.assertEqual(combined.value, 2.5)
        self.assertAlmostEqual(combined.standard_error, np.std([1, 2, 3, 4], ddof=1) / 2.0, places=15)
        self.assertEqual(combined.n_trials, 4)

    def test_single_trial_has_zero_error(self):
        """Test that one trial has zero standard error"""
        self.assertEqual(aggregate_reports([MetricsReport("kl", 0.3)]).standard_error, 0.0)

    def test_invalid_reports(self):
        """Test that invalid reports are rejected"""
        with self.assertRaises(PreconditionError):
            MetricsReport("kl", 0.1, n_trials=0)
        with self.assertRaises(PreconditionError):
            aggregate_reports([MetricsReport("kl", 0.1), MetricsReport("err", 0.1)])


class GridTests(SimpleTestCase):
    """Test predictive grids, grid KL and grid CSVs"""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.dir = Path(self.tmp.name)
        # 3 x 4 cells over the unit square
        self.geometry = GridGeometry((-1, 1), (-1, 1), 3, 4)

    def _constant_grid(self, probs, geometry=None):
        geometry = geometry or self.geometry
        return Grid2D(geometry, np.tile(probs, (geometry.n_cells, 1)))

    def test_two_by_two_centres(self):
        """Test cell centres of a 2x2 grid"""
        centers = GridGeometry((-1, 1), (-1, 1), 2, 2).centers()
        np.testing.assert_array_equal(centers, [[-0.5, -0.5], [0.5, -0.5], [-0.5, 0.5], [0.5, 0.5]])

    def test_resolution_must_be_at_least_two(self):
        """Test that resolution below two is rejected"""
        with self.assertRaises(PreconditionError):
            GridGeometry((-1, 1), (-1, 1), 1, 5)

    def test_kl_of_identical_grids_is_zero(self):
        """Test that identical grids have zero KL"""
        grid = self._constant_grid([0.2, 0.8])
        self.assertEqual(kl_grid(grid, grid), 0.0)

    def test_kl_hand_value(self):
        """Test grid KL against a hand-computed value"""
        kl = kl_grid(self._constant_grid([0.5, 0.5]), self._constant_grid([0.25, 0.75]))
        self.assertAlmostEqual(kl, 0.5 * np.log(2.0) + 0.5 * np.log(0.5 / 0.75), places=14)
        self.assertAlmostEqual(kl, 0.1438, places=4)

    def test_kl_is_non_negative_and_clamped(self):
        """Test that grid KL is non-negative and clamps zero approximate probabilities"""
        rng = np.random.default_rng(0)
        for _ in range(50):
            p = Grid2D(self.geometry, rng.dirichlet(np.ones(3), size=12))
            q = Grid2D(self.geometry, rng.dirichlet(np.ones(3), size=12))
            self.assertGreaterEqual(kl_grid(p, q), 0.0)
        confident_wrong = kl_grid(self._constant_grid([1.0, 0.0]), self._constant_grid([0.0, 1.0]))
        self.assertAlmostEqual(confident_wrong, -np.log(1e-12), places=9)

    def test_geometry_mismatch(self):
        """Test that grids of different geometry cannot be compared"""
        other = GridGeometry((-1, 1), (-1, 1), 4, 3)
        with self.assertRaises(ShapeError):
            kl_grid(self._constant_grid([0.5, 0.5]), self._constant_grid([0.5, 0.5], other))

    def test_constant_predictor_gives_constant_grid(self):
        """Test that a constant predictor fills the grid with one value"""
        spec = MlpSpec((2, 3))
        grid = predictive_grid(StudentPredictor(_bias_only_classifier(spec, [0.1, 0.2, 0.3])), (-2, 2), (-2, 2), 5)
        self.assertTrue(np.all(grid.values == grid.values[0]))

    def test_ensemble_grid_matches_per_cell_prediction(self):
        """Test that every grid cell matches a single-point prediction"""
        spec = MlpSpec((2, 4, 2))
        rng = np.random.default_rng(4)
        ensemble = PosteriorEnsemble([init_params(spec, rng) for _ in range(3)], spec)
        grid = predictive_grid(EnsemblePredictor(ensemble), (-3, 3), (-2, 2), (4, 3))
        centers = grid.geometry.centers()
        for cell in (0, 5, 11):
            np.testing.assert_allclose(
                grid.values[cell], ensemble_predict_class(spec, ensemble, centers[cell]).probs, atol=1e-14
            )

    def test_wrong_input_dimension(self):
        """Test that a grid needs a 2D-input model"""
        with self.assertRaises(ShapeError):
            predictive_grid(StudentPredictor(_bias_only_classifier(MlpSpec((3, 2)), [0.0, 0.0])))

    def test_csv_dump_and_reload(self):
        """Test writing a grid CSV with its sidecar and reading it back"""
        grid = Grid2D(self.geometry, np.random.default_rng(1).dirichlet(np.ones(2), size=12))
        path = write_grid_csv(self.dir / "grid.csv", grid, method="sgld")
        frame = pd.read_csv(path)
        self.assertEqual(list(frame.columns), ["x", "y", "p_class0", "p_class1"])
        self.assertEqual(len(frame), 12)
        self.assertTrue(sidecar_path(path).exists())

        restored = read_grid_csv(path)
        self.assertEqual(restored.geometry, grid.geometry)
        self.assertEqual(restored.kind, CATEGORICAL)
        np.testing.assert_array_equal(restored.values, grid.values)

    def test_repeat_dump_is_byte_identical(self):
        """Test that dumping the same grid twice gives the same bytes"""
        grid = self._constant_grid([0.3, 0.7])
        first = write_grid_csv(self.dir / "a.csv", grid).read_bytes()
        second = write_grid_csv(self.dir / "b.csv", grid).read_bytes()
        self.assertEqual(first, second)


class BandTests(SimpleTestCase):
    """Test 1D predictive bands"""

    def test_plugin_band_has_noise_width(self):
        """Test that a plugin band is exactly the noise wide"""
        noise = NoiseModel(1.0 / 9.0)
        predictor = EnsemblePredictor.plugin(_constant_regressor(1.0), noise)
        band = predictive_band(predictor, np.linspace(-6, 6, 13))
        self.assertEqual(list(band.columns), ["x", "mu", "std", "lower", "upper"])
        self.assertTrue(np.all(band["std"] == np.sqrt(9.0)))
        np.testing.assert_allclose(band["upper"] - band["lower"], 18.0)

    def test_band_needs_one_dimensional_input(self):
        """Test that a band needs a 1D-input model"""
        with self.assertRaises(ShapeError):
            predictive_band(StudentPredictor(_bias_only_classifier(MlpSpec((2, 2)), [0.0, 0.0])), [0.0])
