"""
Student data generators. Student inputs never need labels; the teacher supplies them.
"""
from dataclasses import dataclass

import numpy as np

from lab.exceptions import PreconditionError, ShapeError


@dataclass(frozen=True)
class UniformBox:
    """i.i.d. uniform inputs inside per-dimension bounds."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lower = np.atleast_1d(np.asarray(self.lower, dtype=np.float64))
        upper = np.atleast_1d(np.asarray(self.upper, dtype=np.float64))
        if lower.shape != upper.shape or lower.ndim != 1:
            raise ShapeError(f"Bounds must be matching vectors, got {lower.shape} and {upper.shape}")
        if not np.all(lower < upper):
            raise PreconditionError("Every lower bound must be below its upper bound")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @classmethod
    def square(cls, low, high, dims):
        return cls(np.full(dims, float(low)), np.full(dims, float(high)))

    @property
    def n_features(self):
        return self.lower.shape[0]

    def sample(self, m, rng):
        return rng.uniform(self.lower, self.upper, size=(m, self.n_features))

    def describe(self):
        return {"kind": "uniform_box", "lower": self.lower.tolist(), "upper": self.upper.tolist()}


@dataclass(frozen=True)
class PerturbTrain:
    """Training rows picked with replacement plus N(0, sigma^2) noise per feature."""

    source: np.ndarray
    sigma: float = 0.0

    def __post_init__(self):
        source = np.asarray(self.source, dtype=np.float64)
        if source.ndim == 1:
            source = source[:, None]
        if source.ndim != 2 or source.shape[0] == 0:
            raise PreconditionError("PerturbTrain needs a non-empty source set")
        sigma = np.asarray(self.sigma, dtype=np.float64)
        if np.any(sigma < 0):
            raise PreconditionError(f"Perturbation std must be non-negative, got {self.sigma}")
        object.__setattr__(self, "source", source)
        object.__setattr__(self, "sigma", sigma)

    @property
    def n_features(self):
        return self.source.shape[1]

    def sample(self, m, rng):
        rows = self.source[rng.integers(0, self.source.shape[0], size=m)]
        if np.any(self.sigma > 0):
            rows = rows + self.sigma * rng.standard_normal(rows.shape)
        return rows

    def describe(self):
        return {"kind": "perturb_train", "rows": int(self.source.shape[0]), "sigma": self.sigma.tolist()}


def gen_student_batch(gen, M, rng):
    if M < 1:
        raise PreconditionError(f"Student batch size must be >= 1, got {M}")
    return gen.sample(M, rng)
