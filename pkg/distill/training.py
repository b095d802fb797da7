"""
Distilled SGLD: each iteration takes one SGLD step on the teacher and one SGD
step on the student against the fresh teacher sample.
"""
import logging
from dataclasses import asdict, dataclass
from typing import NamedTuple, Optional, Union

import numpy as np
import pandas as pd

from lab.exceptions import DivergedChainError, HeadMismatchError, NonFiniteParamsError, PreconditionError
from networks.mlp import HeadKind, ParamVector, backward, forward, init_params
from objectives.losses import (
    distill_loss_classification,
    distill_loss_regression,
    log_softmax,
    log_softmax_backward,
)
from samplers.chains import DEFAULT_INIT_SCALE, ChainConfig, ChainKind, StepSchedule, TeacherChain
from samplers.ensemble import PosteriorEnsemble
from utils import atomic_write_text
from .generators import PerturbTrain, UniformBox, gen_student_batch

logger = logging.getLogger(__name__)

CLASSIFICATION = "classification"
REGRESSION = "regression"


@dataclass(frozen=True)
class StudentConfig:
    rho: StepSchedule
    gamma: float = 0.0
    M: int = 1
    init_scale: float = DEFAULT_INIT_SCALE

    def __post_init__(self):
        if self.gamma < 0:
            raise PreconditionError(f"Student prior precision must be >= 0, got {self.gamma}")
        if self.M < 1:
            raise PreconditionError(f"Student batch size must be >= 1, got {self.M}")


@dataclass(frozen=True)
class DistillConfig:
    teacher: ChainConfig
    student: StudentConfig
    gen: Union[UniformBox, PerturbTrain]
    # joint iterations; defaults to the teacher chain length
    T: Optional[int] = None
    seed: int = 0
    history_every: int = 100

    def __post_init__(self):
        if self.T is None:
            object.__setattr__(self, "T", self.teacher.T)
        if self.T < 0:
            raise PreconditionError(f"Iteration count must be >= 0, got {self.T}")
        if self.history_every < 1:
            raise PreconditionError(f"History interval must be >= 1, got {self.history_every}")
        if self.teacher.prior_precision <= self.student.gamma:
            logger.warning(
                f"Teacher prior precision {self.teacher.prior_precision} does not exceed "
                f"student prior precision {self.student.gamma}"
            )

    def summary(self):
        return {
            "teacher": self.teacher.summary(),
            "student": {**asdict(self.student), "rho": asdict(self.student.rho)},
            "gen": self.gen.describe(),
            "T": self.T,
            "seed": self.seed,
        }


@dataclass
class StudentStreams:
    init: np.random.Generator
    data: np.random.Generator
    pick: np.random.Generator

    @classmethod
    def from_seed(cls, seed):
        init, data, pick = (np.random.default_rng(child) for child in np.random.SeedSequence(seed).spawn(3))
        return cls(init, data, pick)


@dataclass(frozen=True)
class HistoryRecord:
    iteration: int
    teacher_nll: float
    student_loss: float
    # lowest loss any student could reach on the same batch
    loss_floor: float


class DistillOutcome(NamedTuple):
    student: ParamVector
    teacher_ensemble: PosteriorEnsemble
    history: list


def distill_task(teacher_spec, student_spec):
    if teacher_spec.input_width != student_spec.input_width:
        raise HeadMismatchError(f"Teacher {teacher_spec} and student {student_spec} read different inputs")
    if teacher_spec.head is HeadKind.SOFTMAX and student_spec.head is HeadKind.SOFTMAX:
        if teacher_spec.n_classes != student_spec.n_classes:
            raise HeadMismatchError(f"Teacher {teacher_spec} and student {student_spec} predict different classes")
        return CLASSIFICATION
    if teacher_spec.head is HeadKind.MEAN_ONLY and student_spec.head is HeadKind.MEAN_LOGVAR:
        return REGRESSION
    raise HeadMismatchError(
        f"Cannot distill a {teacher_spec.head.value} teacher into a {student_spec.head.value} student"
    )


def distill_objective(student_spec, w, theta, teacher_spec, batch, noise=None):
    """Batch-mean distillation loss, its gradient w.r.t. w, and the batch loss floor."""
    task = distill_task(teacher_spec, student_spec)
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[0] == 0:
        raise PreconditionError(f"Student batch must be a non-empty matrix, got shape {batch.shape}")
    m = batch.shape[0]

    teacher_out, _ = forward(teacher_spec, theta, batch)
    student_out, trace = forward(student_spec, w, batch)

    if task == CLASSIFICATION:
        teacher_probs = np.exp(log_softmax(teacher_out))
        beta = log_softmax(student_out)
        loss, dbeta = distill_loss_classification(teacher_probs, beta)
        output_grad = log_softmax_backward(beta, dbeta) / m
        floor = -np.sum(teacher_probs * np.log(np.clip(teacher_probs, 1e-300, None)), axis=-1)
    else:
        if noise is None:
            raise PreconditionError("Regression distillation needs the teacher noise model")
        loss, dmu, dalpha = distill_loss_regression(teacher_out[:, 0], student_out[:, 0], student_out[:, 1], noise)
        output_grad = np.stack([dmu, dalpha], axis=1) / m
        floor = np.full(m, 0.5 * (1.0 - np.log(noise.lambda_n)))

    grad = backward(student_spec, w, trace, output_grad)
    return float(np.mean(loss)), grad, float(np.mean(floor))


def student_step(student_spec, w, theta_current, teacher_spec, batch, rho_t, gamma, noise=None):
    """w - rho_t * (batch-mean distillation gradient + gamma * w)."""
    w_next, _ = _student_update(student_spec, w, theta_current, teacher_spec, batch, rho_t, gamma, noise)
    return w_next


def _student_update(student_spec, w, theta, teacher_spec, batch, rho_t, gamma, noise):
    if not rho_t > 0:
        raise PreconditionError(f"Student step size must be positive, got {rho_t}")
    loss, grad, floor = distill_objective(student_spec, w, theta, teacher_spec, batch, noise)
    w_next = w.with_values(w.values - rho_t * (grad.values + gamma * w.values))
    return w_next, (loss, floor)


def _guarded_student_update(t, student_spec, *args):
    """_student_update that reports non-finite parameters as a diverged student at iteration t."""
    try:
        return _student_update(student_spec, *args)
    except NonFiniteParamsError as e:
        logger.error(f"Student {student_spec} diverged at iteration {t}")
        raise DivergedChainError(t, "student") from e


def run_distilled_sgld(teacher_spec, student_spec, dataset, config, noise=None):
    """Joint teacher/student loop; returns (student, retained teacher ensemble, history)."""
    distill_task(teacher_spec, student_spec)
    chain = TeacherChain(ChainKind.SGLD, teacher_spec, dataset, config.teacher, noise)
    streams = StudentStreams.from_seed(config.seed)
    student = init_params(student_spec, streams.init, config.student.init_scale)
    logger.info(
        f"Distilling {teacher_spec} into {student_spec} for {config.T} iterations "
        f"(teacher seed {config.teacher.seed}, student seed {config.seed})"
    )

    samples = []
    history = []
    for t in range(1, config.T + 1):
        teacher_nll = chain.step()
        if chain.retain_now():
            samples.append(chain.params)

        batch = gen_student_batch(config.gen, config.student.M, streams.data)
        student, (loss, floor) = _guarded_student_update(
            t, student_spec, student, chain.params, teacher_spec, batch,
            config.student.rho.at(t - 1), config.student.gamma, noise,
        )
        if t % config.history_every == 0:
            history.append(HistoryRecord(t, teacher_nll, loss, floor))

    ensemble = PosteriorEnsemble(
        samples,
        teacher_spec,
        provenance={"kind": "distilled_sgld", **config.summary()},
        last=chain.params,
    )
    logger.info(f"Distillation finished: {len(samples)} teacher samples retained")
    return DistillOutcome(student, ensemble, history)


def distill_from_ensemble(ensemble, student_spec, config, gen, T, seed=0, noise=None, history_every=100):
    """Train a student against a finished chain, drawing one retained sample per iteration."""
    samples = ensemble.require_samples()
    teacher_spec = ensemble.spec
    distill_task(teacher_spec, student_spec)
    streams = StudentStreams.from_seed(seed)
    student = init_params(student_spec, streams.init, config.init_scale)
    logger.info(f"Distilling {len(samples)} stored samples of {teacher_spec} into {student_spec} for {T} iterations")

    history = []
    for t in range(1, T + 1):
        theta = samples[streams.pick.integers(0, len(samples))]
        batch = gen_student_batch(gen, config.M, streams.data)
        student, (loss, floor) = _guarded_student_update(
            t, student_spec, student, theta, teacher_spec, batch, config.rho.at(t - 1), config.gamma, noise
        )
        if t % history_every == 0:
            history.append(HistoryRecord(t, float("nan"), loss, floor))
    return student, history


def history_frame(history):
    return pd.DataFrame(
        [asdict(record) for record in history],
        columns=["iteration", "teacher_nll", "student_loss", "loss_floor"],
    )


def write_history_csv(path, history):
    return atomic_write_text(path, history_frame(history).to_csv(index=False, float_format="%.17g"))
