"""
Likelihoods, Gaussian priors and the distillation losses with their
closed-form gradients w.r.t. the network outputs.

Functions are written for a single example but broadcast over a leading batch
axis, so the samplers and the student step can call them on whole minibatches.
"""
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from lab.exceptions import PreconditionError, ShapeError
from networks.mlp import HeadKind, backward, forward

HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass(frozen=True)
class Categorical:
    log_probs: np.ndarray

    def __post_init__(self):
        log_probs = np.asarray(self.log_probs, dtype=np.float64)
        object.__setattr__(self, "log_probs", log_probs)
        if np.max(np.abs(logsumexp(log_probs, axis=-1))) > 1e-10:
            raise PreconditionError("Categorical log-probabilities do not normalise")

    @property
    def probs(self):
        return np.exp(self.log_probs)


@dataclass(frozen=True)
class Gaussian:
    mu: float
    log_var: float

    def __post_init__(self):
        if not (np.isfinite(self.mu) and np.isfinite(self.log_var)):
            raise PreconditionError(f"Gaussian predictive needs finite fields, got {self.mu}, {self.log_var}")

    @property
    def std(self):
        return float(np.exp(0.5 * self.log_var))


@dataclass(frozen=True)
class NoiseModel:
    lambda_n: float

    def __post_init__(self):
        if not self.lambda_n > 0:
            raise PreconditionError(f"Noise precision must be positive, got {self.lambda_n}")

    @property
    def variance(self):
        return 1.0 / self.lambda_n


def log_softmax(logits):
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def log_softmax_backward(log_probs, dbeta):
    """Pull a gradient w.r.t. log-probabilities back to the logits."""
    probs = np.exp(log_probs)
    return dbeta - probs * np.sum(dbeta, axis=-1, keepdims=True)


def _check_labels(labels, n_classes):
    labels = np.asarray(labels)
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise PreconditionError(f"Labels must lie in [0, {n_classes}), got {labels}")
    return labels.astype(np.int64)


def nll_data_classification(log_probs, label):
    log_probs = np.asarray(log_probs, dtype=np.float64)
    label = _check_labels(label, log_probs.shape[-1])
    if log_probs.ndim == 1:
        return float(-log_probs[label])
    return -np.take_along_axis(log_probs, label[:, None], axis=-1)[:, 0]


def nll_data_regression(f, y, noise):
    """Full normalised Gaussian negative log-likelihood of y under N(f, 1/lambda_n)."""
    residual = np.asarray(y, dtype=np.float64) - np.asarray(f, dtype=np.float64)
    value = 0.5 * noise.lambda_n * residual ** 2 - 0.5 * np.log(noise.lambda_n) + HALF_LOG_2PI
    return float(value) if np.ndim(value) == 0 else value


def log_prior_grad(params, precision):
    """Unnormalised spherical Gaussian log prior and its gradient."""
    if precision < 0:
        raise PreconditionError(f"Prior precision must be non-negative, got {precision}")
    values = params.values
    log_density = -0.5 * precision * float(values @ values)
    return log_density, params.with_values(-precision * values)


def _likelihood_output_grad(spec, outputs, targets, noise):
    """Minibatch log-likelihood and its gradient w.r.t. the network outputs."""
    if spec.head is HeadKind.SOFTMAX:
        labels = _check_labels(targets, spec.n_classes)
        log_probs = log_softmax(outputs)
        one_hot = np.zeros_like(outputs)
        one_hot[np.arange(len(labels)), labels] = 1.0
        log_lik = float(np.sum(np.take_along_axis(log_probs, labels[:, None], axis=-1)))
        return log_lik, one_hot - np.exp(log_probs)

    if spec.head is HeadKind.MEAN_ONLY:
        if noise is None:
            raise PreconditionError("Regression likelihood needs a noise model")
        f = outputs[:, 0]
        targets = np.asarray(targets, dtype=np.float64)
        log_lik = -float(np.sum(nll_data_regression(f, targets, noise)))
        return log_lik, (noise.lambda_n * (targets - f))[:, None]

    raise ShapeError(f"Teacher networks need a softmax or mean-only head, got {spec.head.value}")


def log_likelihood_grad(spec, params, inputs, targets, noise=None):
    """Summed minibatch log-likelihood and its parameter gradient."""
    outputs, trace = forward(spec, params, inputs)
    log_lik, output_grad = _likelihood_output_grad(spec, outputs, targets, noise)
    return log_lik, backward(spec, params, trace, output_grad)


def posterior_grad_and_nll(spec, params, minibatch, n_total, prior_precision, noise=None):
    """(N/M)-rescaled log-posterior gradient plus the mean minibatch NLL for diagnostics."""
    batch_size = len(minibatch)
    if batch_size == 0:
        raise PreconditionError("Minibatch must not be empty")
    if n_total < batch_size:
        raise PreconditionError(f"N_total={n_total} is smaller than the minibatch ({batch_size})")

    log_lik, lik_grad = log_likelihood_grad(spec, params, minibatch.inputs, minibatch.targets, noise)
    _, prior_grad = log_prior_grad(params, prior_precision)
    grad = prior_grad.values + (n_total / batch_size) * lik_grad.values
    return params.with_values(grad), -log_lik / batch_size


def posterior_grad_estimate(spec, params, minibatch, n_total, prior_precision, noise=None):
    grad, _ = posterior_grad_and_nll(spec, params, minibatch, n_total, prior_precision, noise)
    return grad


def distill_loss_classification(teacher_probs, student_log_probs):
    """Cross entropy of the student against teacher probabilities, and d loss / d beta."""
    teacher_probs = np.asarray(teacher_probs, dtype=np.float64)
    student_log_probs = np.asarray(student_log_probs, dtype=np.float64)
    if teacher_probs.shape != student_log_probs.shape:
        raise ShapeError(f"Teacher {teacher_probs.shape} and student {student_log_probs.shape} disagree")
    if np.any(teacher_probs < 0) or np.any(np.abs(teacher_probs.sum(axis=-1) - 1.0) > 1e-8):
        raise PreconditionError("Teacher probabilities must lie on the simplex")

    loss = -np.sum(teacher_probs * student_log_probs, axis=-1)
    if np.ndim(loss) == 0:
        loss = float(loss)
    return loss, -teacher_probs


def distill_loss_regression(f_teacher, mu, alpha, noise):
    """Expected Gaussian NLL of the student under the teacher's N(f, 1/lambda_n), constants dropped."""
    f_teacher, mu, alpha = (np.asarray(v, dtype=np.float64) for v in (f_teacher, mu, alpha))
    precision_term = np.exp(-alpha)
    spread = (f_teacher - mu) ** 2 + 1.0 / noise.lambda_n

    loss = 0.5 * (alpha + precision_term * spread)
    dmu = precision_term * (mu - f_teacher)
    dalpha = 0.5 * (1.0 - precision_term * spread)
    if loss.ndim == 0:
        return float(loss), float(dmu), float(dalpha)
    return loss, dmu, dalpha
