import tempfile
from pathlib import Path

import numpy as np
import pandas as pd
from django.test import SimpleTestCase

from data.synthetic import gen_toy1d, gen_toy2d
from distill.generators import PerturbTrain, UniformBox, gen_student_batch
from distill.training import (
    DistillConfig,
    StudentConfig,
    StudentStreams,
    distill_from_ensemble,
    distill_objective,
    run_distilled_sgld,
    student_step,
    write_history_csv,
)
from lab.exceptions import DivergedChainError, HeadMismatchError, PreconditionError
from networks.mlp import HeadKind, MlpSpec, ParamVector, init_params
from objectives.losses import NoiseModel, posterior_grad_estimate
from samplers.chains import ChainConfig, ChainKind, ChainStreams, StepSchedule, run_chain, sgld_step
from samplers.ensemble import PosteriorEnsemble


class GeneratorTests(SimpleTestCase):
    """Test student input generators"""

    def test_uniform_box_moments_and_bounds(self):
        """Test uniform box draws stay in bounds and are centred"""
        gen = UniformBox.square(-10.0, 10.0, 2)
        batch = gen_student_batch(gen, 100_000, np.random.default_rng(0))
        self.assertEqual(batch.shape, (100_000, 2))
        self.assertTrue(np.all(np.abs(batch.mean(axis=0)) <= 0.2))
        self.assertTrue(np.all(batch >= -10.0) and np.all(batch <= 10.0))

    def test_box_bounds_must_be_ordered(self):
        """Test that an empty box is rejected"""
        with self.assertRaises(PreconditionError):
            UniformBox([0.0, 1.0], [1.0, 1.0])

    def test_unperturbed_batch_is_made_of_training_rows(self):
        """Test that zero perturbation returns training rows"""
        source = np.arange(12.0).reshape(6, 2)
        batch = gen_student_batch(PerturbTrain(source, 0.0), 50, np.random.default_rng(1))
        rows = {tuple(row) for row in source}
        self.assertTrue(all(tuple(row) in rows for row in batch))

    def test_small_perturbation_magnitude(self):
        """Test the mean absolute size of the input perturbation"""
        rng = np.random.default_rng(2)
        source = rng.integers(0, 256, size=(100, 784)) / 126.0
        gen = PerturbTrain(source, 0.001)
        batch = gen_student_batch(gen, 200, np.random.default_rng(3))
        picked = gen_student_batch(PerturbTrain(source, 0.0), 200, np.random.default_rng(3))
        # same stream, so the same rows are picked before the noise is drawn
        mean_abs = np.abs(batch - picked).mean()
        self.assertAlmostEqual(mean_abs, 0.001 * np.sqrt(2 / np.pi), delta=0.00002)

    def test_empty_source_rejected(self):
        """Test that empty sources and empty batches are rejected"""
        with self.assertRaises(PreconditionError):
            PerturbTrain(np.empty((0, 2)), 0.1)
        with self.assertRaises(PreconditionError):
            gen_student_batch(UniformBox.square(0, 1, 1), 0, np.random.default_rng(0))


class StudentStepTests(SimpleTestCase):
    """Test the distillation objective and student update"""

    def setUp(self):
        self.rng = np.random.default_rng(7)

        # Classifier used as both teacher and student
        self.class_spec = MlpSpec((2, 5, 3))

        # Regression teacher and its mean/log-variance student
        self.teacher_reg = MlpSpec((1, 6, 1), HeadKind.MEAN_ONLY)
        self.student_reg = MlpSpec((1, 6, 2), HeadKind.MEAN_LOGVAR)
        self.noise = NoiseModel(1.0 / 9.0)

    def test_self_distillation_only_decays(self):
        """Test that a student equal to its teacher only feels weight decay"""
        w = init_params(self.class_spec, self.rng)
        batch = self.rng.uniform(-3, 3, size=(8, 2))
        stepped = student_step(self.class_spec, w, w, self.class_spec, batch, 0.1, 0.01)
        np.testing.assert_allclose(stepped.values, w.values - 0.1 * 0.01 * w.values, rtol=0, atol=1e-15)

    def test_regression_descent(self):
        """Test that repeated steps lower the regression distillation loss"""
        theta = init_params(self.teacher_reg, self.rng)
        w = init_params(self.student_reg, self.rng)
        x = np.array([[0.7]])
        losses = []
        for _ in range(100):
            loss, _, _ = distill_objective(self.student_reg, w, theta, self.teacher_reg, x, self.noise)
            losses.append(loss)
            w = student_step(self.student_reg, w, theta, self.teacher_reg, x, 1e-3, 0.0, self.noise)
        self.assertTrue(all(b < a for a, b in zip(losses, losses[1:])))

    def test_batch_gradient_is_mean_of_example_gradients(self):
        """Test that the batch gradient averages per-example gradients"""
        theta = init_params(self.class_spec, self.rng)
        w = init_params(self.class_spec, self.rng)
        batch = self.rng.normal(size=(6, 2))
        _, batch_grad, _ = distill_objective(self.class_spec, w, theta, self.class_spec, batch)
        singles = [distill_objective(self.class_spec, w, theta, self.class_spec, batch[[i]])[1].values for i in range(6)]
        np.testing.assert_allclose(batch_grad.values, np.mean(singles, axis=0), rtol=1e-12, atol=1e-14)

    def test_head_combinations(self):
        """Test that unsupported teacher/student heads are rejected"""
        with self.assertRaises(HeadMismatchError):
            distill_objective(self.student_reg, ParamVector.zeros(self.student_reg),
                              ParamVector.zeros(self.class_spec), self.class_spec, np.zeros((1, 2)))
        with self.assertRaises(HeadMismatchError):
            distill_objective(MlpSpec((2, 4)), ParamVector.zeros(MlpSpec((2, 4))),
                              ParamVector.zeros(self.class_spec), self.class_spec, np.zeros((1, 2)))
        with self.assertRaises(PreconditionError):
            distill_objective(self.student_reg, ParamVector.zeros(self.student_reg),
                              ParamVector.zeros(self.teacher_reg), self.teacher_reg, np.zeros((1, 1)))

    def test_empty_batch_rejected(self):
        """Test that an empty student batch is rejected"""
        w = ParamVector.zeros(self.class_spec)
        with self.assertRaises(PreconditionError):
            student_step(self.class_spec, w, w, self.class_spec, np.empty((0, 2)), 0.1, 0.0)


class DistilledSgldTests(SimpleTestCase):
    """Test the joint teacher/student loop"""

    def setUp(self):
        self.dataset = gen_toy2d(0)
        self.teacher_spec = MlpSpec((2, 4, 2))
        self.student_spec = MlpSpec((2, 6, 2))

        # Short chain: 10 retained samples over 300 iterations
        self.teacher = ChainConfig(StepSchedule.constant(0.01), T=300, B=100, tau=20, M=5, prior_precision=1.0, seed=11)
        self.student = StudentConfig(StepSchedule.constant(0.05), gamma=1e-3, M=10)

    def _config(self, **overrides):
        options = dict(
            teacher=self.teacher, student=self.student, gen=UniformBox.square(-10, 10, 2), seed=5, history_every=50
        )
        options.update(overrides)
        return DistillConfig(**options)

    def test_zero_iterations(self):
        """Test that T=0 returns the initial student and no samples"""
        config = self._config(T=0)
        student, ensemble, history = run_distilled_sgld(self.teacher_spec, self.student_spec, self.dataset, config)
        initial = init_params(self.student_spec, StudentStreams.from_seed(5).init)
        self.assertEqual(student.values.tobytes(), initial.values.tobytes())
        self.assertEqual(len(ensemble), 0)
        self.assertEqual(history, [])

    def test_iteration_count_defaults_to_teacher(self):
        """Test that the joint loop runs as long as the teacher chain"""
        self.assertEqual(self._config().T, 300)

    def test_single_iteration_unrolls(self):
        """Test one joint iteration against a hand-unrolled teacher and student step"""
        config = self._config(T=1)
        student, _, _ = run_distilled_sgld(self.teacher_spec, self.student_spec, self.dataset, config)

        chain_streams = ChainStreams.from_seed(self.teacher.seed)
        theta = init_params(self.teacher_spec, chain_streams.init)
        indices = chain_streams.minibatch.integers(0, len(self.dataset), size=self.teacher.M)
        grad = posterior_grad_estimate(
            self.teacher_spec, theta, self.dataset.take(indices), len(self.dataset), self.teacher.prior_precision
        )
        theta = sgld_step(theta, grad, 0.01, chain_streams.noise)

        student_streams = StudentStreams.from_seed(5)
        w = init_params(self.student_spec, student_streams.init)
        batch = gen_student_batch(config.gen, self.student.M, student_streams.data)
        w = student_step(self.student_spec, w, theta, self.teacher_spec, batch, 0.05, 1e-3)

        self.assertEqual(student.values.tobytes(), w.values.tobytes())

    def test_teacher_trajectory_untouched_by_student(self):
        """Test that the student never changes the teacher chain"""
        _, ensemble, _ = run_distilled_sgld(self.teacher_spec, self.student_spec, self.dataset, self._config())
        reference = run_chain(ChainKind.SGLD, self.teacher_spec, self.dataset, self.teacher)
        self.assertEqual(len(ensemble), 10)
        self.assertEqual(ensemble.stacked().tobytes(), reference.stacked().tobytes())
        self.assertEqual(ensemble.last.values.tobytes(), reference.last.values.tobytes())

    def test_rerun_is_bit_identical(self):
        """Test that a rerun with the same seeds is bit identical"""
        first = run_distilled_sgld(self.teacher_spec, self.student_spec, self.dataset, self._config())
        second = run_distilled_sgld(self.teacher_spec, self.student_spec, self.dataset, self._config())
        self.assertEqual(first.student.values.tobytes(), second.student.values.tobytes())
        self.assertEqual(first.history, second.history)

    def test_history_cadence_and_loss_floor(self):
        """Test history spacing and that the loss never drops below its floor"""
        _, _, history = run_distilled_sgld(self.teacher_spec, self.student_spec, self.dataset, self._config())
        self.assertEqual([record.iteration for record in history], [50, 100, 150, 200, 250, 300])
        for record in history:
            self.assertGreaterEqual(record.student_loss, record.loss_floor - 1e-12)

    def test_regression_recipe_runs(self):
        """Test a short toy 1D distillation end to end"""
        dataset = gen_toy1d()
        teacher = ChainConfig(StepSchedule.constant(1e-3), T=200, B=100, tau=10, M=5, prior_precision=1.0, seed=1)
        config = DistillConfig(
            teacher, StudentConfig(StepSchedule.constant(1e-4), 1e-3, 10),
            UniformBox.square(-6, 6, 1), seed=2, history_every=100,
        )
        student, ensemble, history = run_distilled_sgld(
            MlpSpec((1, 10, 1), HeadKind.MEAN_ONLY), MlpSpec((1, 10, 2), HeadKind.MEAN_LOGVAR),
            dataset, config, NoiseModel(1.0 / 9.0),
        )
        self.assertTrue(np.isfinite(student.values).all())
        self.assertEqual(len(ensemble), 10)
        self.assertEqual(len(history), 2)

    def test_mismatched_heads_rejected_before_running(self):
        """Test that head mismatches fail before any iteration"""
        with self.assertRaises(HeadMismatchError):
            run_distilled_sgld(self.teacher_spec, MlpSpec((2, 4, 3)), self.dataset, self._config())


class FinishedChainDistillationTests(SimpleTestCase):
    """Test distilling against stored samples"""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)

    def test_frozen_teacher_loss_stays_above_entropy(self):
        """Test distilling a fixed teacher and writing the history CSV"""
        spec = MlpSpec((2, 5, 2))
        theta = init_params(spec, np.random.default_rng(0))
        ensemble = PosteriorEnsemble.single(theta)
        student, history = distill_from_ensemble(
            ensemble, spec, StudentConfig(StepSchedule.constant(0.05), 0.0, 20),
            UniformBox.square(-3, 3, 2), T=400, seed=1, history_every=20,
        )
        self.assertTrue(np.isfinite(student.values).all())
        self.assertEqual(len(history), 20)
        for record in history:
            self.assertGreaterEqual(record.student_loss, record.loss_floor - 1e-12)
        self.assertLess(history[-1].student_loss - history[-1].loss_floor, history[0].student_loss - history[0].loss_floor)

        path = write_history_csv(Path(self.tmp.name) / "history.csv", history)
        frame = pd.read_csv(path)
        self.assertEqual(list(frame.columns), ["iteration", "teacher_nll", "student_loss", "loss_floor"])
        self.assertEqual(frame["iteration"].tolist(), list(range(20, 401, 20)))
        self.assertTrue(frame["teacher_nll"].isna().all())

    def test_overflowing_student_step_is_a_divergence(self):
        """An update that overflows surfaces as a diverged student at that iteration."""
        spec = MlpSpec((2, 5, 2))
        ensemble = PosteriorEnsemble.single(init_params(spec, np.random.default_rng(0)))
        # rho * gamma * w overflows float64 on the first step
        config = StudentConfig(StepSchedule.constant(1e308), 10.0, 20)
        with np.errstate(all="ignore"), self.assertRaises(DivergedChainError) as ctx:
            distill_from_ensemble(ensemble, spec, config, UniformBox.square(-3, 3, 2), T=5, seed=1)
        self.assertEqual(ctx.exception.which, "student")
        self.assertEqual(ctx.exception.iteration, 1)

    def test_empty_ensemble_rejected(self):
        """Test that an empty ensemble cannot be distilled"""
        spec = MlpSpec((2, 3, 2))
        with self.assertRaises(PreconditionError):
            distill_from_ensemble(
                PosteriorEnsemble([], spec), spec, StudentConfig(StepSchedule.constant(0.1)),
                UniformBox.square(0, 1, 2), T=1,
            )
