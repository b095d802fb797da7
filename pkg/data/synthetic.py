"""
Synthetic datasets for the toy experiments and the conjugate sampler check.
"""
import numpy as np

from .dataset import Dataset

# Shipped seeds so every toy recipe is bit-reproducible.
CANONICAL_TOY2D_SEED = 2015
CANONICAL_TOY1D_SEED = 1506

TOY2D_CLASS_MEANS = np.array([[-2.0, -2.0], [2.0, 2.0]])
TOY1D_X_RANGE = (-4.0, 4.0)
TOY1D_NOISE_STD = 3.0


def gen_toy2d(seed=CANONICAL_TOY2D_SEED, points_per_class=10):
    """Two unit-covariance Gaussian blobs at (-2,-2) and (2,2); the Bayes boundary is the anti-diagonal."""
    rng = np.random.default_rng(seed)
    blobs = [rng.standard_normal((points_per_class, 2)) + mean for mean in TOY2D_CLASS_MEANS]
    labels = np.repeat(np.arange(len(blobs)), points_per_class)
    return Dataset(np.vstack(blobs), labels, n_classes=len(blobs))


def gen_toy1d(seed=CANONICAL_TOY1D_SEED, n_points=20, x_range=TOY1D_X_RANGE, noise_std=TOY1D_NOISE_STD):
    """y = x^3 + eps with eps ~ N(0, noise_std^2); noise_std=0 gives the noiseless curve."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(x_range[0], x_range[1], size=n_points)
    eps = rng.standard_normal(n_points) * noise_std
    return Dataset(x[:, None], x ** 3 + eps)


def gen_conjugate(seed, n_points=50, true_mean=1.0, noise_precision=1.0):
    """Scalar observations y ~ N(true_mean, 1/noise_precision) attached to zero inputs.

    Fitting a 1-1 mean-only network to this data makes the bias the only
    parameter the likelihood sees, so its posterior is the textbook
    Gaussian-Gaussian conjugate posterior.
    """
    rng = np.random.default_rng(seed)
    y = true_mean + rng.standard_normal(n_points) / np.sqrt(noise_precision)
    return Dataset(np.zeros((n_points, 1)), y)


def conjugate_gaussian_posterior(dataset, prior_precision, noise):
    """Closed-form posterior (mean, variance) of the mean under a N(0, 1/prior_precision) prior."""
    precision = prior_precision + len(dataset) * noise.lambda_n
    mean = noise.lambda_n * float(np.sum(dataset.targets)) / precision
    return mean, 1.0 / precision
