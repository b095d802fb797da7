import hashlib
import json
import shutil
import struct
import tempfile
from io import StringIO
from pathlib import Path

import numpy as np
import pandas as pd
from django.conf import settings
from django.contrib.auth import get_user_model
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase, TestCase, override_settings, tag
from rest_framework import status
from rest_framework.test import APIClient

from evaluation.metrics import MetricsReport
from experiments.compare import compare_runs, evaluate_assertion, parse_run_argument
from experiments.config import (
    RESOLVED_CONFIG_NAME,
    build_config,
    load_experiment_config,
    parse_override,
    read_config_file,
    render_config,
)
from experiments.models import ExperimentRun
from experiments.runner import (
    EXIT_DIVERGED,
    EXIT_OK,
    emit_grid,
    run_experiment,
    trial_seeds,
    write_metrics_csv,
)
from lab.exceptions import ConfigError, PreconditionError
from networks.checkpoint import save_params
from networks.mlp import HeadKind, MlpSpec, ParamVector
from objectives.losses import NoiseModel

User = get_user_model()


def toy2d_sgd(out, **extra):
    values = {
        "experiment_name": "toy2d",
        "experiment_method": "sgd",
        "experiment_out": str(out),
        "teacher_arch": "2-5-2",
        "teacher_eta": 0.01,
        "teacher_iterations": 200,
        "teacher_batch_size": 10,
        "hmc_reference": False,
        "eval_grid_resolution": 10,
        "data_test_points": 50,
    }
    values.update(extra)
    return values


def toy1d_sgd(out, **extra):
    values = {
        "experiment_name": "toy1d",
        "experiment_method": "sgd",
        "experiment_out": str(out),
        "teacher_arch": "1-5-1",
        "teacher_eta": 1e-4,
        "teacher_iterations": 200,
        "teacher_batch_size": 20,
        "teacher_noise_precision": 0.25,
        "eval_band_points": 11,
        "data_test_points": 50,
    }
    values.update(extra)
    return values


def write_text(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def write_metrics(path, rows):
    """rows: {metric: mean}"""
    return write_metrics_csv(path, [MetricsReport(name, value) for name, value in rows.items()])


class TempDirMixin:
    """Fresh temporary directory per test"""

    def setUp(self):
        super().setUp()
        self.tmp = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.tmp, ignore_errors=True)
        super().tearDown()


class ConfigFileTests(TempDirMixin, SimpleTestCase):
    """INI parsing, overrides and validation"""

    def test_sections_flatten_to_section_key(self):
        """Keys read back as <section>_<key>; comments are dropped"""
        path = write_text(self.tmp / "a.cfg", "[experiment]\nname = toy2d  # inline\n; full line\n[teacher]\neta = 1e-3\n")
        self.assertEqual(read_config_file(path), {"experiment_name": "toy2d", "teacher_eta": "1e-3"})

    def test_unknown_section_is_named(self):
        """Test that an unknown section is named in the error"""
        path = write_text(self.tmp / "a.cfg", "[trainer]\neta = 1\n")
        with self.assertRaises(ConfigError) as cm:
            read_config_file(path)
        self.assertEqual(cm.exception.field, "trainer")

    def test_missing_file(self):
        """Test that a missing config file is a config error"""
        with self.assertRaises(ConfigError) as cm:
            read_config_file(self.tmp / "missing.cfg")
        self.assertEqual(cm.exception.field, "config")

    def test_override_syntax(self):
        """Test parsing of section.key=value overrides"""
        self.assertEqual(parse_override("teacher.eta = 1e-5"), ("teacher_eta", "1e-5"))
        self.assertEqual(parse_override("student.box=-6:6"), ("student_box", "-6:6"))
        for bad in ("teacher_eta=1", "teacher.eta", "nowhere.eta=1"):
            with self.assertRaises(ConfigError):
                parse_override(bad)

    def test_flags_override_file_values(self):
        """Test that overrides win over file values"""
        path = write_text(
            self.tmp / "a.cfg",
            "[experiment]\nname = toy2d\nmethod = sgd\nseed = 1\n[teacher]\narch = 2-5-2\neta = 0.01\niterations = 100\n",
        )
        config = load_experiment_config(
            path, overrides=["teacher.iterations=300", "eval.grid_resolution=20"], seed=7, out=self.tmp / "run", workers=3
        )
        self.assertEqual(config.seed, 7)
        self.assertEqual(config.workers, 3)
        self.assertEqual(config.output_dir, self.tmp / "run")
        self.assertEqual(config.get("teacher_iterations"), 300)
        self.assertEqual(config.get("eval_grid_resolution"), 20)

    def test_unknown_experiment_names_the_field(self):
        """Test that an unknown experiment names its field"""
        with self.assertRaises(ConfigError) as cm:
            build_config(toy2d_sgd(self.tmp, experiment_name="cifar"))
        self.assertEqual(cm.exception.field, "experiment_name")
        self.assertIn("cifar", cm.exception.reason)

    def test_hmc_only_for_small_experiments(self):
        """Test that HMC is refused for Boston"""
        with self.assertRaises(ConfigError) as cm:
            build_config({
                "experiment_name": "boston", "experiment_method": "hmc", "teacher_arch": "13-50-1",
                "teacher_noise_precision": 1.25, "data_path": "housing.csv", "data_train_n": 456, "data_test_n": 50,
            })
        self.assertEqual(cm.exception.field, "experiment_method")

    def test_conjugate_check_rejects_sgd(self):
        """Test that the conjugate check needs a sampler"""
        with self.assertRaises(ConfigError) as cm:
            build_config({
                "experiment_name": "conjugate-check", "experiment_method": "sgd", "teacher_arch": "1-1",
                "teacher_eta": 0.01, "teacher_iterations": 10, "teacher_noise_precision": 1.0,
            })
        self.assertEqual(cm.exception.field, "experiment_method")

    def test_n_trials_at_least_one(self):
        """Test that n_trials must be at least one"""
        with self.assertRaises(ConfigError) as cm:
            build_config(toy2d_sgd(self.tmp, experiment_n_trials=0))
        self.assertEqual(cm.exception.field, "experiment_n_trials")

    def test_unknown_key_is_rejected(self):
        """Test that unknown keys are rejected"""
        with self.assertRaises(ConfigError) as cm:
            build_config(toy2d_sgd(self.tmp, teacher_learning_rate=0.1))
        self.assertEqual(cm.exception.field, "teacher_learning_rate")

    def test_chain_methods_need_a_step_size(self):
        """Test that chain methods need a step size"""
        values = toy2d_sgd(self.tmp)
        del values["teacher_eta"]
        with self.assertRaises(ConfigError) as cm:
            build_config(values)
        self.assertEqual(cm.exception.field, "teacher_eta")

    def test_burn_in_shorter_than_chain(self):
        """Test that burn-in must be shorter than the chain"""
        with self.assertRaises(ConfigError) as cm:
            build_config(toy2d_sgd(self.tmp, teacher_burn_in=200))
        self.assertEqual(cm.exception.field, "teacher_burn_in")

    def test_architecture_must_match_experiment(self):
        """Test that the architecture must fit the data"""
        with self.assertRaises(ConfigError) as cm:
            build_config(toy2d_sgd(self.tmp, teacher_arch="3-5-2"))
        self.assertEqual(cm.exception.field, "teacher_arch")

        with self.assertRaises(ConfigError) as cm:
            build_config(toy2d_sgd(self.tmp, teacher_arch="2-x-2"))
        self.assertEqual(cm.exception.field, "teacher_arch")

    def test_regression_student_needs_two_outputs(self):
        """Test that a regression student needs two outputs"""
        with self.assertRaises(ConfigError) as cm:
            build_config(toy1d_sgd(self.tmp, experiment_method="distill", student_arch="1-5-1", student_rho=1e-3))
        self.assertEqual(cm.exception.field, "student_arch")

    def test_regression_needs_noise_precision(self):
        """Test that regression needs a noise precision"""
        values = toy1d_sgd(self.tmp)
        del values["teacher_noise_precision"]
        with self.assertRaises(ConfigError) as cm:
            build_config(values)
        self.assertEqual(cm.exception.field, "teacher_noise_precision")

    def test_resolved_config_reads_back_identically(self):
        """Test that the resolved config reads back to the same values"""
        config = build_config(toy2d_sgd(
            self.tmp / "run", experiment_method="distill", student_arch="2-10-10-2", student_rho=1e-3,
            experiment_source="toy 2D; distilled row", teacher_init_scale=0.5,
        ))
        path = write_text(self.tmp / RESOLVED_CONFIG_NAME, render_config(config))
        self.assertEqual(load_experiment_config(path).flat(), config.flat())

    def test_canonical_configs_validate(self):
        """Every shipped recipe is valid and names its source"""
        paths = sorted(Path(settings.EXPERIMENT_CONFIG_DIR).glob("*.cfg"))
        self.assertGreaterEqual(len(paths), 16)
        for path in paths:
            with self.subTest(config=path.name):
                config = load_experiment_config(path)
                self.assertTrue(config.source)
                self.assertTrue(config.scale)

    def test_desk_mnist_is_labelled(self):
        """Test that the desk MNIST config is labelled as such"""
        config = load_experiment_config(Path(settings.EXPERIMENT_CONFIG_DIR) / "mnist_sgld_desk.cfg")
        self.assertIn("not paper scale", config.scale)
        self.assertEqual(config.get("data_subset"), 10000)
        self.assertEqual(config.get("teacher_arch"), "784-100-100-10")


class CompareRunsTests(TempDirMixin, SimpleTestCase):
    """Comparison tables and the assertion grammar"""

    def test_identical_files_have_zero_deltas(self):
        """Test that identical metric files have zero deltas"""
        a = write_metrics(self.tmp / "a" / "metrics.csv", {"x": 1.5, "y": -2.0})
        b = write_metrics(self.tmp / "b" / "metrics.csv", {"x": 1.5, "y": -2.0})
        comparison = compare_runs({"a": a, "b": b})
        self.assertEqual(list(comparison.table.index), ["x", "y"])
        self.assertTrue(np.all(comparison.table["delta_b"] == 0.0))

    def test_run_directories_are_accepted(self):
        """Test that run directories resolve to their metrics.csv"""
        write_metrics(self.tmp / "a" / "metrics.csv", {"x": 1.0})
        write_metrics(self.tmp / "b" / "metrics.csv", {"x": 3.0})
        comparison = compare_runs({"a": self.tmp / "a", "b": self.tmp / "b"})
        self.assertEqual(comparison.table.at["x", "delta_b"], 2.0)

    def test_only_shared_metrics_are_aligned(self):
        """Test that only shared metrics are compared"""
        a = write_metrics(self.tmp / "a.csv", {"x": 1.0, "only_a": 2.0})
        b = write_metrics(self.tmp / "b.csv", {"x": 0.0, "only_b": 2.0})
        self.assertEqual(list(compare_runs({"a": a, "b": b}).table.index), ["x"])

    def test_disjoint_metrics(self):
        """Test that runs with no shared metric cannot be compared"""
        a = write_metrics(self.tmp / "a.csv", {"x": 1.0})
        b = write_metrics(self.tmp / "b.csv", {"y": 1.0})
        with self.assertRaises(PreconditionError):
            compare_runs({"a": a, "b": b})

    def test_needs_two_runs(self):
        """Test that comparing needs two runs"""
        a = write_metrics(self.tmp / "a.csv", {"x": 1.0})
        with self.assertRaises(PreconditionError):
            compare_runs({"a": a})

    def test_simple_assertion(self):
        """a.x > b.x with a.x = 1, b.x = 0 passes"""
        a = write_metrics(self.tmp / "a.csv", {"x": 1.0})
        b = write_metrics(self.tmp / "b.csv", {"x": 0.0})
        (result,) = compare_runs({"a": a, "b": b}).check(["a.x > b.x"])
        self.assertTrue(result.passed)
        self.assertEqual((result.lhs, result.rhs), (1.0, 0.0))

    def test_ordering_report_for_grid_kl(self):
        """Test the KL ordering report"""
        runs = {
            "sgd": write_metrics(self.tmp / "sgd.csv", {"kl_to_hmc": 0.246}),
            "sgld": write_metrics(self.tmp / "sgld.csv", {"kl_to_hmc": 0.007}),
            "distilled": write_metrics(self.tmp / "distilled.csv", {"kl_to_hmc": 0.009}),
        }
        comparison = compare_runs(runs)
        self.assertEqual(comparison.table.at["kl_to_hmc", "ordering"], "sgld < distilled < sgd")
        results = comparison.check([
            "sgd.kl_to_hmc >= 10 * sgld.kl_to_hmc",
            "distilled.kl_to_hmc <= 3 * sgld.kl_to_hmc",
            "distilled.kl_to_hmc < sgld.kl_to_hmc",
        ])
        self.assertEqual([result.passed for result in results], [True, True, False])

    def test_expression_grammar(self):
        """Test the assertion grammar"""
        values = {"sgld": {"test_loglik": -2.306}, "distilled": {"test_loglik": -2.350}}
        self.assertTrue(evaluate_assertion("abs(distilled.test_loglik - sgld.test_loglik) <= 0.15", values).passed)
        self.assertTrue(evaluate_assertion("-sgld.test_loglik / 2 > 1", values).passed)
        self.assertFalse(evaluate_assertion("max(sgld.test_loglik, distilled.test_loglik) == -2.35", values).passed)

    def test_bad_assertions(self):
        """Test that malformed or unsafe assertions are rejected"""
        values = {"a": {"x": 1.0}}
        for expression in ("a.y > 0", "b.x > 0", "a.x", "0 < a.x < 2", "__import__('os') == 0", "a.x >"):
            with self.subTest(expression=expression):
                with self.assertRaises(ConfigError):
                    evaluate_assertion(expression, values)

    def test_run_labels(self):
        """Test run labels from label=path and from paths"""
        self.assertEqual(parse_run_argument("sgld=runs/x", 0), ("sgld", Path("runs/x")))
        self.assertEqual(parse_run_argument("runs/toy2d_sgd/metrics.csv", 0)[0], "toy2d_sgd")
        self.assertEqual(parse_run_argument("runs/toy2d-sgd", 3)[0], "run3")


class RunExperimentTests(TempDirMixin, TestCase):
    """End-to-end runs at toy sizes"""

    def test_trial_seeds(self):
        """Test that trial seeds are fixed and distinct"""
        self.assertEqual(trial_seeds(5, 3), trial_seeds(5, 3))
        self.assertEqual(len(set(trial_seeds(5, 3))), 3)
        self.assertNotEqual(trial_seeds(5, 1), trial_seeds(6, 1))

    def test_toy2d_sgd_writes_metrics_and_grid(self):
        """Test that a toy 2D SGD run writes metrics and a grid"""
        outcome = run_experiment(build_config(toy2d_sgd(self.tmp / "run")))
        self.assertEqual(outcome.exit_code, EXIT_OK)

        metrics = pd.read_csv(self.tmp / "run" / "metrics.csv")
        self.assertEqual(list(metrics.columns), ["metric", "mean", "standard_error", "n_trials"])
        self.assertIn("misclass_rate", set(metrics["metric"]))
        self.assertNotIn("kl_to_hmc", set(metrics["metric"]))

        grid = pd.read_csv(self.tmp / "run" / "trial_0" / "grid.csv")
        self.assertEqual(list(grid.columns), ["x", "y", "p_class0", "p_class1"])
        self.assertEqual(len(grid), 100)
        for name in ("sgd.bdk", "grid.csv.meta.json"):
            self.assertTrue((self.tmp / "run" / "trial_0" / name).exists())
        for name in (RESOLVED_CONFIG_NAME, "trials.csv", "timings.csv", "metadata.json"):
            self.assertTrue((self.tmp / "run" / name).exists())

        run = ExperimentRun.objects.get(pk=outcome.run_id)
        self.assertEqual(run.status, "succeeded")
        self.assertIn("misclass_rate", run.metrics)

    def test_metadata_carries_source_and_conventions(self):
        """Test metadata source, scale and KL convention"""
        run_experiment(build_config(toy2d_sgd(self.tmp / "run", experiment_source="toy 2D; SGD row")))
        metadata = json.loads((self.tmp / "run" / "metadata.json").read_text())
        self.assertEqual(metadata["source"], "toy 2D; SGD row")
        self.assertEqual(metadata["status"], "succeeded")
        self.assertIn("KL(reference || approx)", metadata["kl_direction"])
        self.assertEqual(metadata["trial_seeds"], trial_seeds(0, 1))

    def test_rerun_is_byte_identical(self):
        """Test that a rerun writes byte-identical metrics"""
        config = toy2d_sgd(self.tmp / "first", experiment_n_trials=2)
        run_experiment(build_config(config))
        run_experiment(build_config({**config, "experiment_out": str(self.tmp / "second")}))
        for name in ("metrics.csv", "trials.csv"):
            self.assertEqual((self.tmp / "first" / name).read_bytes(), (self.tmp / "second" / name).read_bytes())

    def test_worker_count_does_not_change_results(self):
        """Test that worker count does not change results"""
        config = toy2d_sgd(self.tmp / "serial", experiment_n_trials=3)
        run_experiment(build_config(config))
        run_experiment(build_config({**config, "experiment_out": str(self.tmp / "parallel"), "experiment_workers": 3}))
        self.assertEqual(
            (self.tmp / "serial" / "metrics.csv").read_bytes(),
            (self.tmp / "parallel" / "metrics.csv").read_bytes(),
        )

    def test_trials_aggregate_with_standard_error(self):
        """Test aggregation of several trials"""
        run_experiment(build_config(toy2d_sgd(self.tmp / "run", experiment_n_trials=3)))
        metrics = pd.read_csv(self.tmp / "run" / "metrics.csv").set_index("metric")
        trials = pd.read_csv(self.tmp / "run" / "trials.csv")
        values = trials[trials["metric"] == "test_loglik"]["value"].to_numpy()
        self.assertEqual(len(values), 3)
        self.assertAlmostEqual(metrics.at["test_loglik", "mean"], values.mean(), places=12)
        self.assertAlmostEqual(
            metrics.at["test_loglik", "standard_error"], values.std(ddof=1) / np.sqrt(3), places=12
        )
        self.assertEqual(metrics.at["test_loglik", "n_trials"], 3)
        self.assertEqual(len(pd.read_csv(self.tmp / "run" / "timings.csv")), 3)

    def test_toy2d_kl_against_hmc_reference(self):
        """Test that KL to the HMC reference is reported"""
        outcome = run_experiment(build_config(toy2d_sgd(
            self.tmp / "run", hmc_reference=True, hmc_samples=20, hmc_burn_in=5, hmc_leapfrog_steps=5,
        )))
        names = {report.name: report.value for report in outcome.reports}
        self.assertGreaterEqual(names["kl_to_hmc"], 0.0)
        self.assertTrue((self.tmp / "run" / "trial_0" / "hmc_reference_grid.csv").exists())

    def test_toy2d_hmc_method(self):
        """Test a toy 2D HMC run"""
        outcome = run_experiment(build_config(toy2d_sgd(
            self.tmp / "run", experiment_method="hmc", hmc_samples=20, hmc_burn_in=5, hmc_leapfrog_steps=5,
        )))
        names = {report.name for report in outcome.reports}
        self.assertIn("hmc_acceptance_rate", names)
        self.assertNotIn("kl_to_hmc", names)
        self.assertTrue((self.tmp / "run" / "trial_0" / "hmc.bdke").exists())

    def test_toy2d_distill_reports_student_and_teacher(self):
        """Test that distillation reports student and teacher metrics"""
        outcome = run_experiment(build_config(toy2d_sgd(
            self.tmp / "run", experiment_method="distill", teacher_burn_in=100, teacher_thin=10,
            student_arch="2-5-2", student_rho=0.01, student_batch_size=10, student_history_every=50,
        )))
        names = {report.name for report in outcome.reports}
        self.assertTrue({"misclass_rate", "test_loglik", "teacher_misclass_rate", "teacher_test_loglik"} <= names)
        trial_dir = self.tmp / "run" / "trial_0"
        for name in ("student.bdk", "teacher.bdke", "grid.csv", "teacher_grid.csv"):
            self.assertTrue((trial_dir / name).exists())
        history = pd.read_csv(trial_dir / "history.csv")
        self.assertEqual(list(history["iteration"]), [50, 100, 150, 200])

    def test_distill_against_finished_chain(self):
        """Test distilling against a finished chain"""
        outcome = run_experiment(build_config(toy2d_sgd(
            self.tmp / "run", experiment_method="distill", teacher_burn_in=100, teacher_thin=10,
            student_arch="2-5-2", student_rho=0.01, student_batch_size=10, student_history_every=50,
            student_mode="finished_chain", student_iterations=100,
        )))
        self.assertEqual(outcome.exit_code, EXIT_OK)
        history = pd.read_csv(self.tmp / "run" / "trial_0" / "history.csv")
        self.assertEqual(list(history["iteration"]), [50, 100])

    def test_toy1d_sgd_std_is_the_noise_std(self):
        """The plugin predictive has no epistemic spread: std = sqrt(1 / lambda_n) everywhere"""
        run_experiment(build_config(toy1d_sgd(self.tmp / "run")))
        band = pd.read_csv(self.tmp / "run" / "trial_0" / "band.csv")
        self.assertEqual(list(band.columns), ["x", "mu", "std", "lower", "upper"])
        self.assertEqual(len(band), 11)
        self.assertTrue(np.all(band["std"] == 2.0))
        metrics = pd.read_csv(self.tmp / "run" / "metrics.csv").set_index("metric")
        self.assertEqual(metrics.at["std_at_center", "mean"], 2.0)
        self.assertEqual(metrics.at["edge_std_ratio", "mean"], 1.0)

    def test_conjugate_check(self):
        """Test the conjugate-check recipe"""
        outcome = run_experiment(build_config({
            "experiment_name": "conjugate-check", "experiment_method": "sgld",
            "experiment_out": str(self.tmp / "run"),
            "teacher_arch": "1-1", "teacher_eta": 4e-3, "teacher_iterations": 3000, "teacher_burn_in": 500,
            "teacher_thin": 10, "teacher_batch_size": 50, "teacher_noise_precision": 1.0, "data_seed": 8, "data_n_points": 50,
        }))
        names = {report.name: report.value for report in outcome.reports}
        self.assertTrue({"posterior_mean", "exact_posterior_mean", "posterior_var_ratio", "posterior_mean_z"} <= set(names))
        self.assertAlmostEqual(names["exact_posterior_var"], 1.0 / 51.0, places=15)

    def test_divergence_returns_exit_code_three(self):
        """Test that a diverging chain returns exit code 3"""
        with np.errstate(all="ignore"):
            outcome = run_experiment(build_config(toy1d_sgd(
                self.tmp / "run", teacher_arch="1-20-1", teacher_eta=100.0, teacher_iterations=50,
            )))
        self.assertEqual(outcome.exit_code, EXIT_DIVERGED)
        self.assertFalse((self.tmp / "run" / "metrics.csv").exists())
        self.assertEqual(json.loads((self.tmp / "run" / "metadata.json").read_text())["status"], "diverged")
        self.assertEqual(ExperimentRun.objects.get(pk=outcome.run_id).status, "diverged")

    def test_boston_style_csv(self):
        """Test a Boston-style CSV run"""
        rng = np.random.default_rng(3)
        inputs = rng.standard_normal((60, 3))
        targets = inputs @ np.array([1.0, -2.0, 0.5]) + 20.0 + rng.standard_normal(60)
        frame = pd.DataFrame(np.column_stack([inputs, targets]), columns=["a", "b", "c", "MEDV"])
        frame.to_csv(self.tmp / "housing.csv", index=False)

        outcome = run_experiment(build_config({
            "experiment_name": "boston", "experiment_method": "sgld", "experiment_n_trials": 2,
            "experiment_out": str(self.tmp / "run"),
            "teacher_arch": "3-5-1", "teacher_eta": 1e-4, "teacher_iterations": 300, "teacher_burn_in": 100,
            "teacher_thin": 10, "teacher_batch_size": 5, "teacher_noise_precision": 1.25,
            "data_path": str(self.tmp / "housing.csv"), "data_target_column": "MEDV",
            "data_train_n": 40, "data_test_n": 20,
        }))
        by_name = {report.name: report for report in outcome.reports}
        self.assertEqual(set(by_name), {"test_loglik", "test_rmse"})
        self.assertEqual(by_name["test_loglik"].n_trials, 2)
        metadata = json.loads((self.tmp / "run" / "metadata.json").read_text())
        self.assertIn("original units", metadata["target_standardization"])

    def test_missing_data_file_is_a_config_error(self):
        """Test that a missing data file is a config error"""
        with override_settings(DATA_DIR=self.tmp):
            config = build_config({
                "experiment_name": "boston", "experiment_method": "sgd", "experiment_out": str(self.tmp / "run"),
                "teacher_arch": "13-50-1", "teacher_eta": 1e-6, "teacher_iterations": 10,
                "teacher_noise_precision": 1.25, "data_path": "housing.csv", "data_train_n": 456, "data_test_n": 50,
            })
            with self.assertRaises(ConfigError) as cm:
                run_experiment(config)
        self.assertEqual(cm.exception.field, "data_path")
        self.assertEqual(ExperimentRun.objects.get().status, "failed")

    def test_mnist_idx_fixture(self):
        """Test an MNIST run on a small IDX fixture"""
        rng = np.random.default_rng(0)
        for prefix, count in (("train", 40), ("test", 10)):
            images = rng.integers(0, 256, size=(count, 28, 28))
            labels = np.arange(count) % 10
            with open(self.tmp / f"{prefix}-images", "wb") as handle:
                handle.write(struct.pack(">IIII", 0x00000803, count, 28, 28))
                handle.write(bytes(int(v) for v in images.ravel()))
            with open(self.tmp / f"{prefix}-labels", "wb") as handle:
                handle.write(struct.pack(">II", 0x00000801, count))
                handle.write(bytes(int(v) for v in labels))

        outcome = run_experiment(build_config({
            "experiment_name": "mnist", "experiment_method": "sgd", "experiment_out": str(self.tmp / "run"),
            "teacher_arch": "784-5-10", "teacher_eta": 1e-4, "teacher_iterations": 20, "teacher_batch_size": 10,
            "data_images": str(self.tmp / "train-images"), "data_labels": str(self.tmp / "train-labels"),
            "data_test_images": str(self.tmp / "test-images"), "data_test_labels": str(self.tmp / "test-labels"),
            "data_train_n": 30, "data_valid_n": 10,
        }))
        names = {report.name: report.value for report in outcome.reports}
        self.assertEqual(set(names), {"misclass_rate", "test_loglik"})
        self.assertTrue(0.0 <= names["misclass_rate"] <= 1.0)

    def test_emit_grid_from_checkpoint(self):
        """2x2 grid -> 4 data rows; re-emitting gives the same bytes"""
        run_experiment(build_config(toy2d_sgd(self.tmp / "run")))
        checkpoint = self.tmp / "run" / "trial_0" / "sgd.bdk"
        first = emit_grid(checkpoint, self.tmp / "first.csv", resolution=2)
        second = emit_grid(checkpoint, self.tmp / "second.csv", resolution=2)
        self.assertEqual(len(pd.read_csv(first)), 4)
        self.assertEqual(first.read_bytes(), second.read_bytes())

    def test_emit_grid_reads_ensembles(self):
        """Test emit_grid from an ensemble checkpoint"""
        run_experiment(build_config(toy2d_sgd(
            self.tmp / "run", experiment_method="sgld", teacher_burn_in=100, teacher_thin=25,
        )))
        path = emit_grid(self.tmp / "run" / "trial_0" / "sgld.bdke", self.tmp / "grid.csv", resolution=3)
        grid = pd.read_csv(path)
        self.assertEqual(len(grid), 9)
        np.testing.assert_allclose(grid[["p_class0", "p_class1"]].sum(axis=1), 1.0, atol=1e-12)


class GoldenGridTests(TempDirMixin, SimpleTestCase):
    """emit_grid bytes for hand-built checkpoints, pinned by sha256"""

    def emit(self, params, **kwargs):
        checkpoint = save_params(self.tmp / "sgd.bdk", params)
        path = emit_grid(checkpoint, self.tmp / "grid.csv", resolution=4, **kwargs)
        return hashlib.sha256(path.read_bytes()).hexdigest()

    def test_zero_weight_classifier_grid_is_pinned(self):
        """All-zero 2-10-2 classifier: 4x4 cell centres over the default range, p = 0.5 everywhere."""
        digest = self.emit(ParamVector.zeros(MlpSpec((2, 10, 2))))
        self.assertEqual(digest, "49fbd1829f95e276c2461d88ff24fa19170d23205989acdde3eb769b9fb8d439")

    def test_linear_regressor_grid_is_pinned(self):
        """mu = x - 2y + 0.25 with unit noise; every value is exact in binary."""
        # W = (1, -2), b = 0.25
        params = ParamVector(MlpSpec((2, 1), HeadKind.MEAN_ONLY), [1.0, -2.0, 0.25])
        digest = self.emit(params, noise=NoiseModel(1.0))
        self.assertEqual(digest, "df3b017cfa89dea2560c1dc890be942cc9eb5d4d657122c1e5a4ae2a9f54603a")

    def test_pinned_grid_layout(self):
        """Rows run x fastest, then y; cells are centred at -7.5, -2.5, 2.5, 7.5."""
        self.emit(ParamVector(MlpSpec((2, 1), HeadKind.MEAN_ONLY), [1.0, -2.0, 0.25]), noise=NoiseModel(1.0))
        lines = (self.tmp / "grid.csv").read_text().splitlines()
        self.assertEqual(lines[0], "x,y,mu,std")
        self.assertEqual(lines[1], "-7.5,-7.5,7.75,1")
        self.assertEqual(lines[2], "-2.5,-7.5,12.75,1")
        self.assertEqual(lines[-1], "7.5,7.5,-7.25,1")
        self.assertEqual(len(lines), 17)


class CommandTests(TempDirMixin, TestCase):
    """manage.py run / emit_grid / compare exit codes"""

    def write_config(self, text):
        return write_text(self.tmp / "experiment.cfg", text)

    def test_run_command(self):
        """Test the run command"""
        path = self.write_config(
            "[experiment]\nname = toy2d\nmethod = sgd\nsource = toy 2D; SGD row\n"
            "[teacher]\narch = 2-5-2\neta = 0.01\niterations = 100\nbatch_size = 10\n"
            "[hmc]\nreference = false\n[eval]\ngrid_resolution = 10\n"
        )
        stdout = StringIO()
        call_command("run", "--config", str(path), "--out", str(self.tmp / "run"), "--set", "data.test_points=20", stdout=stdout)
        self.assertIn("misclass_rate", stdout.getvalue())
        resolved = read_config_file(self.tmp / "run" / RESOLVED_CONFIG_NAME)
        self.assertEqual(resolved["data_test_points"], "20")
        self.assertEqual(ExperimentRun.objects.get().status, "succeeded")

    def test_unknown_experiment_exits_with_usage(self):
        """Test that a bad config exits 2 with usage"""
        path = self.write_config("[experiment]\nname = cifar\nmethod = sgd\n[teacher]\narch = 2-5-2\n")
        stderr = StringIO()
        with self.assertRaises(CommandError) as cm:
            call_command("run", "--config", str(path), "--out", str(self.tmp / "run"), stderr=stderr)
        self.assertEqual(cm.exception.returncode, 2)
        self.assertIn("usage:", stderr.getvalue())
        self.assertIn("experiment_name", str(cm.exception))

    def test_missing_config_file_exits_two(self):
        """Test that a missing config file exits 2"""
        with self.assertRaises(CommandError) as cm:
            call_command("run", "--config", str(self.tmp / "nope.cfg"), stderr=StringIO())
        self.assertEqual(cm.exception.returncode, 2)

    def test_divergence_exits_three(self):
        """Test that divergence exits 3"""
        path = self.write_config(
            "[experiment]\nname = toy1d\nmethod = sgd\n"
            "[teacher]\narch = 1-20-1\neta = 100\niterations = 50\nbatch_size = 20\nnoise_precision = 0.25\n"
        )
        with np.errstate(all="ignore"):
            with self.assertRaises(CommandError) as cm:
                call_command("run", "--config", str(path), "--out", str(self.tmp / "run"), stdout=StringIO())
        self.assertEqual(cm.exception.returncode, 3)

    def test_emit_grid_command(self):
        """Test the emit_grid command"""
        run_experiment(build_config(toy2d_sgd(self.tmp / "run")))
        out = self.tmp / "grid.csv"
        call_command(
            "emit_grid", "--checkpoint", str(self.tmp / "run" / "trial_0" / "sgd.bdk"),
            "--out", str(out), "--resolution", "2", stdout=StringIO(),
        )
        self.assertEqual(len(pd.read_csv(out)), 4)
        self.assertTrue((self.tmp / "grid.csv.meta.json").exists())

    def test_emit_grid_rejects_one_dimensional_models(self):
        """Test that emit_grid refuses a 1D-input model"""
        run_experiment(build_config(toy1d_sgd(self.tmp / "run")))
        with self.assertRaises(CommandError) as cm:
            call_command(
                "emit_grid", "--checkpoint", str(self.tmp / "run" / "trial_0" / "sgd.bdk"),
                "--out", str(self.tmp / "grid.csv"), "--noise-precision", "0.25", stderr=StringIO(),
            )
        self.assertEqual(cm.exception.returncode, 2)

    def test_compare_passing_assertion(self):
        """Test compare with a passing assertion"""
        a = write_metrics(self.tmp / "a" / "metrics.csv", {"x": 1.0})
        b = write_metrics(self.tmp / "b" / "metrics.csv", {"x": 0.0})
        stdout = StringIO()
        call_command(
            "compare", f"a={a}", f"b={b}", "--assert", "a.x > b.x",
            "--csv", str(self.tmp / "comparison.csv"), stdout=stdout,
        )
        self.assertIn("PASS", stdout.getvalue())
        table = pd.read_csv(self.tmp / "comparison.csv")
        self.assertEqual(list(table.columns), ["metric", "a", "b", "delta_b", "ordering"])

    def test_compare_failing_assertion_exits_one(self):
        """Test that a failing assertion exits 1"""
        a = write_metrics(self.tmp / "a.csv", {"x": 1.0})
        b = write_metrics(self.tmp / "b.csv", {"x": 0.0})
        with self.assertRaises(CommandError) as cm:
            call_command("compare", f"a={a}", f"b={b}", "--assert", "a.x < b.x", stdout=StringIO())
        self.assertEqual(cm.exception.returncode, 1)

    def test_compare_disjoint_metrics_exits_two(self):
        """Test that disjoint metrics exit 2"""
        a = write_metrics(self.tmp / "a.csv", {"x": 1.0})
        b = write_metrics(self.tmp / "b.csv", {"y": 0.0})
        with self.assertRaises(CommandError) as cm:
            call_command("compare", f"a={a}", f"b={b}", stderr=StringIO())
        self.assertEqual(cm.exception.returncode, 2)


class ExperimentRunApiTests(TestCase):
    """The read-only runs API is for staff only"""

    def setUp(self):
        self.client = APIClient()

        # Create users
        self.user = User.objects.create_user(username="user", password="testpass123")
        self.staff_user = User.objects.create_user(username="staff", password="testpass123", is_staff=True)
        # Create a finished run
        self.run = ExperimentRun.objects.create(
            experiment="toy2d", method="sgld", master_seed=0, n_trials=1,
            output_dir="runs/toy2d_sgld_seed0", status="succeeded", metrics={"kl_to_hmc": 0.01},
        )

    def test_staff_can_list_runs(self):
        """Test that staff can list runs"""
        self.client.force_authenticate(user=self.staff_user)
        response = self.client.get("/api/runs/")
        self.assertEqual(response.status_code, status.HTTP_200_OK)
        self.assertEqual(response.data[0]["metrics"], {"kl_to_hmc": 0.01})

    def test_runs_filter_by_method(self):
        """Test filtering runs by method"""
        ExperimentRun.objects.create(experiment="toy2d", method="sgd", output_dir="runs/toy2d_sgd_seed0")
        self.client.force_authenticate(user=self.staff_user)
        response = self.client.get("/api/runs/", {"method": "sgd"})
        self.assertEqual([run["method"] for run in response.data], ["sgd"])

    def test_staff_can_read_one_run(self):
        """Test that staff can read one run"""
        self.client.force_authenticate(user=self.staff_user)
        response = self.client.get(f"/api/runs/{self.run.pk}/")
        self.assertEqual(response.status_code, status.HTTP_200_OK)
        self.assertEqual(response.data["status"], "succeeded")

    def test_regular_user_cannot_list_runs(self):
        """Test that a regular user cannot list runs"""
        self.client.force_authenticate(user=self.user)
        response = self.client.get("/api/runs/")
        self.assertEqual(response.status_code, status.HTTP_403_FORBIDDEN)

    def test_api_is_read_only(self):
        """Test that the runs API is read only"""
        self.client.force_authenticate(user=self.staff_user)
        response = self.client.post("/api/runs/", {"experiment": "toy2d"})
        self.assertEqual(response.status_code, status.HTTP_405_METHOD_NOT_ALLOWED)


# ======================================================================
# Reproductions (python manage.py test --tag=acceptance)
# ======================================================================
CONFIG_DIR = Path(settings.EXPERIMENT_CONFIG_DIR)


@tag("acceptance")
class AcceptanceTests(TempDirMixin, TestCase):
    """Full recipe reproductions; minutes each"""

    def run_recipe(self, name, label=None):
        out = self.tmp / (label or name)
        call_command("run", "--config", str(CONFIG_DIR / f"{name}.cfg"), "--out", str(out), stdout=StringIO())
        return f"{label or name}={out}"

    def assert_compare(self, runs, *assertions):
        stdout = StringIO()
        args = [*runs]
        for assertion in assertions:
            args += ["--assert", assertion]
        call_command("compare", *args, stdout=stdout)
        return stdout.getvalue()

    def test_toy2d_kl_ordering(self):
        """Test the KL ordering of SGD, SGLD and the student on toy 2D"""
        runs = [
            self.run_recipe("toy2d_sgd", "sgd"),
            self.run_recipe("toy2d_sgld", "sgld"),
            self.run_recipe("toy2d_distill_2-10-2", "small"),
            self.run_recipe("toy2d_distill_2-10-10-2", "deep"),
        ]
        self.assert_compare(
            runs,
            "sgd.kl_to_hmc >= 10 * sgld.kl_to_hmc",
            "deep.kl_to_hmc <= 3 * sgld.kl_to_hmc",
            "small.kl_to_hmc > deep.kl_to_hmc",
        )

    def test_toy1d_uncertainty_grows_away_from_data(self):
        """Test that toy 1D uncertainty grows away from the data"""
        runs = [
            self.run_recipe("toy1d_sgd", "sgd"),
            self.run_recipe("toy1d_sgld", "sgld"),
            self.run_recipe("toy1d_distill", "distilled"),
        ]
        self.assert_compare(
            runs,
            "sgld.std_at_lower >= 2 * sgld.std_at_center",
            "sgld.std_at_upper >= 2 * sgld.std_at_center",
            "distilled.std_at_lower >= 2 * distilled.std_at_center",
            "distilled.std_at_upper >= 2 * distilled.std_at_center",
            "sgd.std_at_lower == 3",
            "sgd.std_at_center == 3",
            "sgd.std_at_upper == 3",
        )

    def test_boston_desk_scale(self):
        """Test Boston at desk scale"""
        if not (Path(settings.DATA_DIR) / "housing.csv").is_file():
            self.skipTest(f"housing.csv not found in {settings.DATA_DIR}")
        runs = [
            self.run_recipe("boston_sgd_desk", "sgd"),
            self.run_recipe("boston_sgld_desk", "sgld"),
            self.run_recipe("boston_distill_desk", "distilled"),
        ]
        self.assert_compare(
            runs,
            "sgld.test_loglik > sgd.test_loglik",
            "abs(distilled.test_loglik - sgld.test_loglik) <= 0.15",
        )

    def test_mnist_desk_scale(self):
        """Test MNIST at desk scale"""
        names = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")
        missing = [name for name in names if not (Path(settings.DATA_DIR) / name).is_file()]
        if missing:
            self.skipTest(f"MNIST files missing from {settings.DATA_DIR}: {', '.join(missing)}")
        runs = [
            self.run_recipe("mnist_sgd_desk", "sgd"),
            self.run_recipe("mnist_sgld_desk", "sgld"),
            self.run_recipe("mnist_distill_desk", "distilled"),
        ]
        self.assert_compare(
            runs,
            "sgld.misclass_rate <= sgd.misclass_rate + 0.002",
            "sgld.test_loglik >= sgd.test_loglik",
            "distilled.misclass_rate <= sgld.misclass_rate + 0.005",
        )
