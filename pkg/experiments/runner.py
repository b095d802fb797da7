"""
Experiment runner: binds data, samplers, distillation and evaluation into the
toy2d, toy1d, boston, mnist and conjugate-check recipes.

One run writes into its output directory:

    config.resolved.cfg   the fully resolved config
    metrics.csv           metric, mean, standard_error, n_trials
    trials.csv            trial, seed, metric, value
    timings.csv           wall-clock per trial (kept out of metrics.csv)
    metadata.json         source, scale label, seeds, conventions, status
    trial_<i>/            checkpoints, grid or band CSVs, distillation history
"""
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
from django.conf import settings
from django.db import DatabaseError
from django.utils import timezone

from data.dataset import Dataset
from data.loaders import MnistSplit, SplitSpec, load_csv_regression, load_mnist_idx
from data.synthetic import (
    CANONICAL_TOY1D_SEED,
    CANONICAL_TOY2D_SEED,
    conjugate_gaussian_posterior,
    gen_conjugate,
    gen_toy1d,
    gen_toy2d,
)
from distill.generators import PerturbTrain, UniformBox
from distill.training import (
    DistillConfig,
    StudentConfig,
    distill_from_ensemble,
    run_distilled_sgld,
    write_history_csv,
)
from evaluation.grids import (
    DEFAULT_RANGE,
    DEFAULT_RESOLUTION,
    KL_DIRECTION,
    KL_EPS,
    GridGeometry,
    kl_grid,
    predictive_band,
    predictive_grid,
    read_grid_csv,
    write_band_csv,
    write_grid_csv,
)
from evaluation.metrics import (
    MetricsReport,
    aggregate_reports,
    classification_reports,
    test_loglik_reg,
    test_rmse,
)
from evaluation.predictive import EnsemblePredictor, StudentPredictor
from lab.exceptions import ConfigError, DivergedChainError, PreconditionError
from networks.checkpoint import load_params, save_params
from networks.mlp import HeadKind, MlpSpec, init_params
from objectives.losses import NoiseModel
from samplers.chains import ChainConfig, ChainKind, StepSchedule, derive_seed, run_chain, run_chains
from samplers.ensemble import MAGIC as ENSEMBLE_MAGIC
from samplers.ensemble import PosteriorEnsemble, load_ensemble, save_ensemble
from samplers.hmc import hmc_sample, network_target
from utils import atomic_write_text, parse_range
from .config import RESOLVED_CONFIG_NAME, render_config
from .models import ExperimentRun

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ASSERTION_FAILED = 1
EXIT_CONFIG_ERROR = 2
EXIT_DIVERGED = 3

# child streams of a trial seed
TEACHER_STREAM = 0
STUDENT_STREAM = 1
HMC_STREAM = 2
SPLIT_STREAM = 3

# child of a toy dataset seed that generates its held-out set
HELD_OUT_STREAM = 1

METRICS_COLUMNS = ["metric", "mean", "standard_error", "n_trials"]
TARGET_STANDARDIZATION = "targets standardised with train-split statistics; log-likelihoods and RMSE in original units"


@dataclass(frozen=True)
class TrialData:
    train: Dataset
    test: Optional[Dataset]
    noise: Optional[NoiseModel]


@dataclass
class FitResult:
    predictor: object
    iterations: int
    ensemble: Optional[PosteriorEnsemble] = None
    # the SGLD teacher of a distilled student, evaluated alongside it
    teacher: Optional[EnsemblePredictor] = None
    reports: list = field(default_factory=list)


@dataclass(frozen=True)
class TrialResult:
    index: int
    seed: int
    reports: list
    seconds: float
    iterations: int


@dataclass(frozen=True)
class RunOutcome:
    exit_code: int
    output_dir: Path
    reports: list
    run_id: Optional[int] = None


def trial_seeds(master_seed, n_trials):
    return [derive_seed(master_seed, index) for index in range(n_trials)]


# ======================================================================
# Data and models
# ======================================================================
def _data_path(key, value):
    path = Path(value)
    if not path.is_absolute():
        path = Path(settings.DATA_DIR) / path
    if not path.is_file():
        raise ConfigError(key, f"data file {path} not found")
    return path


def build_trial_data(config, trial_seed):
    noise_precision = config.get("teacher_noise_precision")
    noise = NoiseModel(noise_precision) if noise_precision is not None else None
    split_seed = derive_seed(trial_seed, SPLIT_STREAM)

    try:
        if config.experiment == "toy2d":
            seed = config.get("data_seed", CANONICAL_TOY2D_SEED)
            train = gen_toy2d(seed, config.get("data_points_per_class"))
            test = gen_toy2d(derive_seed(seed, HELD_OUT_STREAM), max(1, config.get("data_test_points") // 2))
        elif config.experiment == "toy1d":
            seed = config.get("data_seed", CANONICAL_TOY1D_SEED)
            train = gen_toy1d(seed, config.get("data_n_points"))
            test = gen_toy1d(derive_seed(seed, HELD_OUT_STREAM), config.get("data_test_points"))
        elif config.experiment == "conjugate-check":
            train = gen_conjugate(
                config.get("data_seed", 0), config.get("data_n_points"), config.get("data_true_mean"), noise.lambda_n
            )
            test = None
        elif config.experiment == "boston":
            split = SplitSpec(config.get("data_train_n"), config.get("data_test_n"), split_seed)
            train, test = load_csv_regression(
                _data_path("data_path", config.get("data_path")),
                config.get("data_target_column"),
                split,
                standardize_targets=config.get("data_standardize_targets"),
            )
        else:
            split = MnistSplit(config.get("data_train_n", MnistSplit.train_n), config.get("data_valid_n"))
            sets = load_mnist_idx(
                _data_path("data_images", config.get("data_images")),
                _data_path("data_labels", config.get("data_labels")),
                subset=config.get("data_subset"),
                split=split,
                seed=split_seed,
            )
            train, test = sets.train, sets.valid
            if config.get("data_test_images"):
                test = load_mnist_idx(
                    _data_path("data_test_images", config.get("data_test_images")),
                    _data_path("data_test_labels", config.get("data_test_labels")),
                    subset=config.get("data_test_subset"),
                ).train
    except PreconditionError as e:
        raise ConfigError("data", str(e)) from e
    return TrialData(train, test, noise)


def teacher_spec(config):
    head = HeadKind.MEAN_ONLY if config.is_regression else HeadKind.SOFTMAX
    return MlpSpec.from_string(config.get("teacher_arch"), head)


def student_spec(config):
    head = HeadKind.MEAN_LOGVAR if config.is_regression else HeadKind.SOFTMAX
    return MlpSpec.from_string(config.get("student_arch"), head)


def check_data_fit(config, data):
    spec = teacher_spec(config)
    if spec.input_width != data.train.n_features:
        raise ConfigError(
            "teacher_arch", f"{spec} reads {spec.input_width} inputs but the data has {data.train.n_features} features"
        )
    if data.train.is_classification and spec.n_classes != data.train.n_classes:
        raise ConfigError("teacher_arch", f"{spec} predicts {spec.n_classes} classes, the data has {data.train.n_classes}")
    if config.get("teacher_batch_size") > len(data.train):
        raise ConfigError(
            "teacher_batch_size", f"minibatch {config.get('teacher_batch_size')} exceeds {len(data.train)} training rows"
        )


def chain_config(config, seed):
    try:
        chain = ChainConfig(
            eta=StepSchedule(config.get("teacher_eta"), config.get("teacher_eta_decay"), config.get("teacher_eta_every")),
            T=config.get("teacher_iterations"),
            B=config.get("teacher_burn_in"),
            tau=config.get("teacher_thin"),
            M=config.get("teacher_batch_size"),
            prior_precision=config.get("teacher_prior_precision"),
            seed=seed,
            init_scale=config.get("teacher_init_scale"),
        )
    except PreconditionError as e:
        raise ConfigError("teacher", str(e)) from e
    if config.method != "sgd" and chain.retained_count == 0:
        raise ConfigError("teacher_thin", f"T={chain.T}, B={chain.B}, tau={chain.tau} retains no samples")
    return chain


def student_config(config):
    return StudentConfig(
        rho=StepSchedule(config.get("student_rho"), config.get("student_rho_decay"), config.get("student_rho_every")),
        gamma=config.get("student_gamma"),
        M=config.get("student_batch_size"),
        init_scale=config.get("student_init_scale"),
    )


def student_generator(config, train):
    if config.get("student_generator") == "perturb_train":
        return PerturbTrain(train.inputs, config.get("student_sigma"))
    low, high = parse_range(config.get("student_box"))
    return UniformBox.square(low, high, train.n_features)


# ======================================================================
# Methods
# ======================================================================
def fit_sgd(config, data, trial_seed, trial_dir):
    chain = chain_config(config, derive_seed(trial_seed, TEACHER_STREAM))
    params = run_chain(ChainKind.SGD, teacher_spec(config), data.train, chain, data.noise)
    save_params(trial_dir / "sgd.bdk", params)
    return FitResult(EnsemblePredictor.plugin(params, data.noise, "sgd"), chain.T)


def fit_sgld(config, data, trial_seed, trial_dir):
    chain = chain_config(config, derive_seed(trial_seed, TEACHER_STREAM))
    spec = teacher_spec(config)
    n_chains = config.get("teacher_chains")
    if n_chains > 1:
        ensemble = run_chains(spec, data.train, chain, n_chains, data.noise)
    else:
        ensemble = run_chain(ChainKind.SGLD, spec, data.train, chain, data.noise)
    save_ensemble(trial_dir / "sgld.bdke", ensemble)
    return FitResult(EnsemblePredictor(ensemble, data.noise, "sgld"), chain.T * n_chains, ensemble=ensemble)


def sample_hmc(config, data, seed):
    spec = teacher_spec(config)
    rng = np.random.default_rng(seed)
    init = init_params(spec, rng, config.get("teacher_init_scale"))
    log_posterior_fn, grad_fn = network_target(spec, data.train, config.get("teacher_prior_precision"), data.noise)
    return hmc_sample(
        log_posterior_fn,
        grad_fn,
        init,
        config.get("hmc_step_size"),
        config.get("hmc_leapfrog_steps"),
        config.get("hmc_samples"),
        config.get("hmc_burn_in"),
        rng,
        thin=config.get("hmc_thin"),
    )


def fit_hmc(config, data, trial_seed, trial_dir):
    ensemble = sample_hmc(config, data, derive_seed(trial_seed, HMC_STREAM))
    save_ensemble(trial_dir / "hmc.bdke", ensemble)
    iterations = config.get("hmc_burn_in") + config.get("hmc_samples") * config.get("hmc_thin")
    return FitResult(
        EnsemblePredictor(ensemble, data.noise, "hmc"),
        iterations,
        ensemble=ensemble,
        reports=[MetricsReport("hmc_acceptance_rate", ensemble.acceptance_rate)],
    )


def fit_distill(config, data, trial_seed, trial_dir):
    t_spec, s_spec = teacher_spec(config), student_spec(config)
    chain = chain_config(config, derive_seed(trial_seed, TEACHER_STREAM))
    student_seed = derive_seed(trial_seed, STUDENT_STREAM)
    gen = student_generator(config, data.train)
    history_every = config.get("student_history_every")

    if config.get("student_mode") == "finished_chain":
        ensemble = run_chain(ChainKind.SGLD, t_spec, data.train, chain, data.noise)
        T = config.get("student_iterations", chain.T)
        student, history = distill_from_ensemble(
            ensemble, s_spec, student_config(config), gen, T,
            seed=student_seed, noise=data.noise, history_every=history_every,
        )
        iterations = chain.T + T
    else:
        distill_config = DistillConfig(
            chain, student_config(config), gen,
            T=config.get("student_iterations"), seed=student_seed, history_every=history_every,
        )
        student, ensemble, history = run_distilled_sgld(t_spec, s_spec, data.train, distill_config, data.noise)
        iterations = distill_config.T

    save_params(trial_dir / "student.bdk", student)
    write_history_csv(trial_dir / "history.csv", history)
    teacher = None
    if len(ensemble):
        save_ensemble(trial_dir / "teacher.bdke", ensemble)
        teacher = EnsemblePredictor(ensemble, data.noise, "sgld")
    return FitResult(StudentPredictor(student, "distilled"), iterations, ensemble=ensemble, teacher=teacher)


FITTERS = {
    "sgd": fit_sgd,
    "sgld": fit_sgld,
    "hmc": fit_hmc,
    "distill": fit_distill,
}


# ======================================================================
# Evaluation
# ======================================================================
def grid_geometry(config):
    bounds = parse_range(config.get("eval_grid_range"))
    resolution = config.get("eval_grid_resolution")
    return GridGeometry(bounds, bounds, resolution, resolution)


def reference_grid(config, data, trial_seed, trial_dir):
    """The HMC grid that toy2d KL metrics are measured against, if any."""
    if config.experiment != "toy2d" or config.method == "hmc":
        return None

    path = config.get("eval_reference")
    if path:
        reference = read_grid_csv(path)
        if reference.geometry != grid_geometry(config):
            raise ConfigError("eval_reference", f"{path} was written on a different grid")
        return reference
    if not config.get("hmc_reference"):
        return None

    geometry = grid_geometry(config)
    ensemble = sample_hmc(config, data, derive_seed(trial_seed, HMC_STREAM))
    grid = predictive_grid(EnsemblePredictor(ensemble, label="hmc"), geometry.x_range, geometry.y_range, geometry.nx)
    write_grid_csv(trial_dir / "hmc_reference_grid.csv", grid, method="hmc")
    return grid


def evaluate(config, data, predictor, trial_dir, prefix="", reference=None):
    """Metrics and plot artifacts for one predictor; both carry the prefix."""
    reports = []
    if config.experiment == "toy2d":
        geometry = grid_geometry(config)
        grid = predictive_grid(predictor, geometry.x_range, geometry.y_range, geometry.nx)
        write_grid_csv(trial_dir / f"{prefix}grid.csv", grid, method=predictor.label)
        reports += classification_reports(predictor, data.test)
        if reference is not None:
            reports.append(MetricsReport("kl_to_hmc", kl_grid(reference, grid)))

    elif config.experiment == "toy1d":
        low, high = parse_range(config.get("eval_band_range"))
        band = predictive_band(predictor, np.linspace(low, high, config.get("eval_band_points")), data.noise)
        write_band_csv(trial_dir / f"{prefix}band.csv", band)
        _, std = predictor.predict_reg(np.array([[low], [0.0], [high]]), data.noise)
        reports += [
            test_loglik_reg(predictor, data.test, data.noise),
            test_rmse(predictor, data.test, data.noise),
            MetricsReport("std_at_lower", float(std[0])),
            MetricsReport("std_at_center", float(std[1])),
            MetricsReport("std_at_upper", float(std[2])),
            MetricsReport("edge_std_ratio", float(min(std[0], std[2]) / std[1])),
        ]

    elif config.experiment == "boston":
        reports += [test_loglik_reg(predictor, data.test, data.noise), test_rmse(predictor, data.test, data.noise)]

    elif config.experiment == "mnist":
        reports += classification_reports(predictor, data.test)

    return [report.renamed(prefix + report.name) for report in reports]


def evaluate_conjugate(config, data, ensemble):
    """Sampled bias moments against the closed-form conjugate posterior."""
    bias = ensemble.stacked()[:, -1]
    exact_mean, exact_variance = conjugate_gaussian_posterior(data.train, config.get("teacher_prior_precision"), data.noise)
    sample_mean = float(bias.mean())
    reports = [
        MetricsReport("posterior_mean", sample_mean),
        MetricsReport("exact_posterior_mean", exact_mean),
        MetricsReport("exact_posterior_var", exact_variance),
    ]
    if len(bias) > 1:
        sample_variance = float(bias.var(ddof=1))
        standard_error = np.sqrt(sample_variance / len(bias))
        reports += [
            MetricsReport("posterior_var", sample_variance),
            MetricsReport("posterior_var_ratio", sample_variance / exact_variance),
            MetricsReport("posterior_mean_z", abs(sample_mean - exact_mean) / standard_error),
        ]
    return reports


# ======================================================================
# Trials and runs
# ======================================================================
def run_trial(config, index, seed):
    trial_dir = config.output_dir / f"trial_{index}"
    trial_dir.mkdir(parents=True, exist_ok=True)

    data = build_trial_data(config, seed)
    check_data_fit(config, data)
    started = time.perf_counter()
    fit = FITTERS[config.method](config, data, seed, trial_dir)
    seconds = time.perf_counter() - started

    reports = list(fit.reports)
    if config.experiment == "conjugate-check":
        reports += evaluate_conjugate(config, data, fit.ensemble)
    else:
        reference = reference_grid(config, data, seed, trial_dir)
        reports += evaluate(config, data, fit.predictor, trial_dir, reference=reference)
        if fit.teacher is not None:
            reports += evaluate(config, data, fit.teacher, trial_dir, "teacher_", reference)

    logger.info(f"Trial {index} (seed {seed}) finished {fit.iterations} iterations in {seconds:.1f}s")
    return TrialResult(index, seed, sorted(reports, key=lambda report: report.name), seconds, fit.iterations)


def aggregate_trials(trials):
    names = sorted({report.name for trial in trials for report in trial.reports})
    return [
        aggregate_reports([report for trial in trials for report in trial.reports if report.name == name])
        for name in names
    ]


def _write_csv(path, frame):
    return atomic_write_text(path, frame.to_csv(index=False, float_format="%.17g"))


def write_metrics_csv(path, reports):
    return _write_csv(path, pd.DataFrame([report.as_row() for report in reports], columns=METRICS_COLUMNS))


def write_trials_csv(path, trials):
    rows = [
        {"trial": trial.index, "seed": trial.seed, "metric": report.name, "value": report.value}
        for trial in trials
        for report in trial.reports
    ]
    return _write_csv(path, pd.DataFrame(rows, columns=["trial", "seed", "metric", "value"]))


def write_timings_csv(path, trials):
    rows = [
        {
            "trial": trial.index,
            "seed": trial.seed,
            "seconds": trial.seconds,
            "iterations": trial.iterations,
            "seconds_per_iteration": trial.seconds / trial.iterations if trial.iterations else float("nan"),
        }
        for trial in trials
    ]
    return _write_csv(path, pd.DataFrame(rows, columns=["trial", "seed", "seconds", "iterations", "seconds_per_iteration"]))


def write_metadata(config, status, error=""):
    metadata = {
        "experiment": config.experiment,
        "method": config.method,
        "master_seed": config.seed,
        "n_trials": config.n_trials,
        "trial_seeds": trial_seeds(config.seed, config.n_trials),
        "source": config.source,
        "scale": config.scale or "unspecified",
        "status": status,
    }
    if config.experiment == "toy2d":
        metadata["kl_direction"] = KL_DIRECTION
        metadata["kl_eps"] = KL_EPS
    if config.experiment == "boston" and config.get("data_standardize_targets"):
        metadata["target_standardization"] = TARGET_STANDARDIZATION
    if error:
        metadata["error"] = error
    return atomic_write_text(config.output_dir / "metadata.json", json.dumps(metadata, indent=2, sort_keys=True) + "\n")


def _record_start(config):
    try:
        return ExperimentRun.objects.create(
            experiment=config.experiment,
            method=config.method,
            master_seed=config.seed,
            n_trials=config.n_trials,
            output_dir=str(config.output_dir),
            source=config.source[:255],
        )
    except DatabaseError as e:
        logger.warning(f"Run registry unavailable, not recording this run ({e})")
        return None


def _record_finish(run, status, metrics=None, error=""):
    if run is None:
        return
    run.status = status
    run.metrics = metrics or {}
    run.error = error
    run.finished_at = timezone.now()
    try:
        run.save()
    except DatabaseError as e:
        logger.warning(f"Could not update run {run.pk} ({e})")


def run_experiment(config):
    """
    Run every trial of an experiment and write its artifacts.

    Trials run on config.workers threads, each from its own seed
    derive_seed(master_seed, trial_index), so results do not depend on the
    worker count. Returns EXIT_DIVERGED when a chain or student blows up;
    configuration problems raise ConfigError.
    """
    out = config.output_dir
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / RESOLVED_CONFIG_NAME, render_config(config))
    run = _record_start(config)
    run_id = run.pk if run is not None else None
    seeds = trial_seeds(config.seed, config.n_trials)
    logger.info(
        f"Running {config.experiment}/{config.method}: {config.n_trials} trial(s) "
        f"on {config.workers} worker(s) into {out}"
    )

    try:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            trials = list(pool.map(partial(run_trial, config), range(config.n_trials), seeds))
    except DivergedChainError as e:
        logger.error(f"{config.experiment}/{config.method} diverged: {e}")
        write_metadata(config, "diverged", str(e))
        _record_finish(run, "diverged", error=str(e))
        return RunOutcome(EXIT_DIVERGED, out, [], run_id)
    except Exception as e:
        write_metadata(config, "failed", str(e))
        _record_finish(run, "failed", error=str(e))
        raise

    reports = aggregate_trials(trials)
    write_metrics_csv(out / "metrics.csv", reports)
    write_trials_csv(out / "trials.csv", trials)
    write_timings_csv(out / "timings.csv", trials)
    write_metadata(config, "succeeded")
    _record_finish(run, "succeeded", metrics={report.name: report.value for report in reports})
    logger.info(f"Wrote {len(reports)} metrics for {config.experiment}/{config.method} to {out / 'metrics.csv'}")
    return RunOutcome(EXIT_OK, out, reports, run_id)


# ======================================================================
# Grid emission from checkpoints
# ======================================================================
def load_predictor(path, noise=None):
    """A predictor from a parameter checkpoint or an ensemble file, told apart by magic."""
    path = Path(path)
    with open(path, "rb") as handle:
        magic = handle.read(len(ENSEMBLE_MAGIC))
    if magic == ENSEMBLE_MAGIC:
        return EnsemblePredictor(load_ensemble(path), noise, label=path.stem)
    params = load_params(path)
    if params.spec.head is HeadKind.MEAN_LOGVAR:
        return StudentPredictor(params, label=path.stem)
    return EnsemblePredictor.plugin(params, noise, label=path.stem)


def emit_grid(checkpoint, out, x_range=DEFAULT_RANGE, y_range=None, resolution=DEFAULT_RESOLUTION, noise=None):
    predictor = load_predictor(checkpoint, noise)
    grid = predictive_grid(predictor, x_range, y_range or x_range, resolution)
    return write_grid_csv(out, grid, method=predictor.label, checkpoint=str(checkpoint))
