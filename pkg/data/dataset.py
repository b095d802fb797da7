from dataclasses import dataclass
from typing import Optional

import numpy as np

from lab.exceptions import PreconditionError, ShapeError


@dataclass(frozen=True)
class ColumnStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, values):
        values = np.asarray(values, dtype=np.float64)
        std = values.std(axis=0)
        # constant columns pass through unscaled
        std = np.where(std > 0, std, 1.0)
        return cls(values.mean(axis=0), std)

    def apply(self, values):
        return (np.asarray(values, dtype=np.float64) - self.mean) / self.std

    def invert(self, values):
        return np.asarray(values, dtype=np.float64) * self.std + self.mean


@dataclass(frozen=True)
class Dataset:
    """N x D inputs with class-index or real targets. Arrays are frozen after construction."""

    inputs: np.ndarray
    targets: np.ndarray
    n_classes: Optional[int] = None
    input_stats: Optional[ColumnStats] = None
    target_stats: Optional[ColumnStats] = None

    def __post_init__(self):
        inputs = np.array(self.inputs, dtype=np.float64)
        if inputs.ndim == 1:
            inputs = inputs[:, None]
        if self.n_classes is None:
            targets = np.array(self.targets, dtype=np.float64)
        else:
            targets = np.array(self.targets, dtype=np.int64)

        if inputs.ndim != 2 or inputs.shape[0] < 1:
            raise ShapeError(f"Dataset needs a non-empty N x D input matrix, got {inputs.shape}")
        if targets.shape != (inputs.shape[0],):
            raise ShapeError(f"{inputs.shape[0]} inputs but targets of shape {targets.shape}")
        if not (np.all(np.isfinite(inputs)) and np.all(np.isfinite(targets))):
            raise PreconditionError("Dataset contains non-finite values")
        if self.n_classes is not None and (targets.min() < 0 or targets.max() >= self.n_classes):
            raise PreconditionError(f"Class labels must lie in [0, {self.n_classes})")

        inputs.setflags(write=False)
        targets.setflags(write=False)
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "targets", targets)

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def n_features(self):
        return self.inputs.shape[1]

    @property
    def is_classification(self):
        return self.n_classes is not None

    def take(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.inputs[indices],
            self.targets[indices],
            n_classes=self.n_classes,
            input_stats=self.input_stats,
            target_stats=self.target_stats,
        )

    def target_scale(self):
        """Standard deviation that converts standardised targets back to original units."""
        if self.target_stats is None:
            return 1.0
        return float(self.target_stats.std[0])
