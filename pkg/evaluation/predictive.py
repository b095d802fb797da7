"""
Posterior predictive distributions.

An EnsemblePredictor averages the per-sample likelihoods of a PosteriorEnsemble
(a plugin SGD fit is an ensemble of one); a StudentPredictor reads the
predictive straight off a distilled network's head.
"""
import numpy as np

from lab.exceptions import PreconditionError, ShapeError
from networks.mlp import HeadKind, ParamVector, forward
from objectives.losses import HALF_LOG_2PI, Categorical, log_softmax, nll_data_regression
from samplers.ensemble import PosteriorEnsemble

# posterior samples evaluated together when averaging class probabilities
SAMPLE_CHUNK = 32


def log_mean_exp(values, axis=0):
    """log(mean(exp(values))) along axis; S identical terms reduce to that term exactly."""
    peak = np.max(values, axis=axis, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    return np.squeeze(peak, axis=axis) + np.log(np.mean(np.exp(values - peak), axis=axis))


def _as_batch(x, spec):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.input_width:
        raise ShapeError(f"{spec} expects inputs with {spec.input_width} columns, got {x.shape}")
    return x, single


def _combine_log_means(log_mean, count, chunk_log_mean, chunk_count):
    """Log mean over count + chunk_count terms from the log means of the two parts."""
    if log_mean is None:
        return chunk_log_mean
    total = count + chunk_count
    return np.logaddexp(log_mean + np.log(count / total), chunk_log_mean + np.log(chunk_count / total))


class EnsemblePredictor:
    """
    Equal-weight mixture over the samples of a PosteriorEnsemble.

    Classification averages are accumulated sample_chunk samples at a time,
    so memory stays at sample_chunk x N x K whatever the ensemble size.
    An ensemble without a spec (flat sample vectors) needs one passed in.
    """

    def __init__(self, ensemble, noise=None, label="ensemble", spec=None, sample_chunk=SAMPLE_CHUNK):
        samples = ensemble.require_samples()
        if ensemble.spec is not None and spec is not None and ensemble.spec != spec:
            raise ShapeError(f"Ensemble of {ensemble.spec} used as {spec}")
        if ensemble.spec is None and spec is None:
            raise PreconditionError("Predictions need a network ensemble or an explicit spec")
        if sample_chunk < 1:
            raise PreconditionError(f"sample_chunk must be >= 1, got {sample_chunk}")
        self.ensemble = ensemble
        self.spec = ensemble.spec or spec
        if ensemble.spec is None:
            samples = [ParamVector(self.spec, getattr(theta, "values", theta)) for theta in samples]
        self.samples = samples
        self.noise = noise
        self.label = label
        self.sample_chunk = sample_chunk

    @classmethod
    def plugin(cls, params, noise=None, label="sgd"):
        return cls(PosteriorEnsemble.single(params), noise, label)

    @property
    def is_classification(self):
        return self.spec.head is HeadKind.SOFTMAX

    def _outputs(self, x, samples=None):
        """S x N x K network outputs, in sample order."""
        return np.stack([forward(self.spec, theta, x)[0] for theta in (samples or self.samples)])

    def _log_mean_over_samples(self, x, per_sample):
        """log mean_s exp(per_sample(outputs_s)), one chunk of samples in memory at a time."""
        log_mean, count = None, 0
        for start in range(0, len(self.samples), self.sample_chunk):
            chunk = self.samples[start:start + self.sample_chunk]
            chunk_log_mean = log_mean_exp(per_sample(self._outputs(x, chunk)), axis=0)
            log_mean = _combine_log_means(log_mean, count, chunk_log_mean, len(chunk))
            count += len(chunk)
        return log_mean

    def _noise(self, noise):
        noise = noise or self.noise
        if noise is None:
            raise PreconditionError("Regression predictions need a noise model")
        return noise

    def predict_class(self, x):
        """N x K log of the averaged softmax probabilities."""
        x, _ = _as_batch(x, self.spec)
        return self._log_mean_over_samples(x, log_softmax)

    def predict_reg(self, x, noise=None):
        """Exact mean and std of the equal-weight mixture of N(f_s, 1/lambda_n)."""
        noise = self._noise(noise)
        x, _ = _as_batch(x, self.spec)
        f = self._outputs(x)[:, :, 0]
        return f.mean(axis=0), np.sqrt(f.var(axis=0) + noise.variance)

    def log_density_class(self, x, labels):
        x, _ = _as_batch(x, self.spec)
        labels = np.asarray(labels, dtype=np.int64)

        def picked(outputs):
            return np.take_along_axis(log_softmax(outputs), labels[None, :, None], axis=-1)[:, :, 0]

        return self._log_mean_over_samples(x, picked)

    def log_density_reg(self, x, y, noise=None):
        noise = self._noise(noise)
        x, _ = _as_batch(x, self.spec)
        f = self._outputs(x)[:, :, 0]
        log_densities = -nll_data_regression(f, np.asarray(y, dtype=np.float64)[None, :], noise)
        return log_mean_exp(log_densities, axis=0)


class StudentPredictor:

    def __init__(self, params, label="distilled"):
        if params.spec.head is HeadKind.MEAN_ONLY:
            raise PreconditionError("A distilled regression student needs a mean and log-variance head")
        self.params = params
        self.spec = params.spec
        self.label = label

    @property
    def is_classification(self):
        return self.spec.head is HeadKind.SOFTMAX

    def predict_class(self, x):
        x, _ = _as_batch(x, self.spec)
        return log_softmax(forward(self.spec, self.params, x)[0])

    def _gaussian(self, x):
        x, _ = _as_batch(x, self.spec)
        outputs = forward(self.spec, self.params, x)[0]
        return outputs[:, 0], outputs[:, 1]

    def predict_reg(self, x, noise=None):
        mu, alpha = self._gaussian(x)
        return mu, np.exp(0.5 * alpha)

    def log_density_class(self, x, labels):
        log_probs = self.predict_class(x)
        labels = np.asarray(labels, dtype=np.int64)
        return np.take_along_axis(log_probs, labels[:, None], axis=-1)[:, 0]

    def log_density_reg(self, x, y, noise=None):
        mu, alpha = self._gaussian(x)
        y = np.asarray(y, dtype=np.float64)
        return -(0.5 * (alpha + np.exp(-alpha) * (y - mu) ** 2) + HALF_LOG_2PI)


def ensemble_predict_class(spec, ensemble, x):
    """Categorical of the averaged per-sample probabilities; batched when x is a matrix."""
    predictor = EnsemblePredictor(ensemble, spec=spec)
    x_batch, single = _as_batch(x, spec)
    log_probs = predictor.predict_class(x_batch)
    return Categorical(log_probs[0] if single else log_probs)


def ensemble_predict_reg(spec, ensemble, x, noise):
    """(mixture mean, mixture std); scalars for a single input row."""
    predictor = EnsemblePredictor(ensemble, noise, spec=spec)
    x_batch, single = _as_batch(x, spec)
    mean, std = predictor.predict_reg(x_batch)
    if single:
        return float(mean[0]), float(std[0])
    return mean, std
