"""
Predictive grids over 2D input space, the grid KL used to compare methods,
and 1D regression bands.

Grid dumps are CSV (x, y, p_class0..p_class{K-1} or x, y, mu, std) with a JSON
sidecar at <path>.meta.json describing the geometry and the KL convention.
"""
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from lab.exceptions import DataFormatError, PreconditionError, ShapeError
from utils import atomic_write_text

logger = logging.getLogger(__name__)

DEFAULT_RANGE = (-10.0, 10.0)
DEFAULT_RESOLUTION = 100
KL_EPS = 1e-12
KL_DIRECTION = "KL(reference || approx), mean over cells"
CATEGORICAL = "categorical"
GAUSSIAN = "gaussian"
BAND_WIDTH = 3.0


@dataclass(frozen=True)
class GridGeometry:
    x_range: tuple = DEFAULT_RANGE
    y_range: tuple = DEFAULT_RANGE
    nx: int = DEFAULT_RESOLUTION
    ny: int = DEFAULT_RESOLUTION

    def __post_init__(self):
        object.__setattr__(self, "x_range", tuple(float(v) for v in self.x_range))
        object.__setattr__(self, "y_range", tuple(float(v) for v in self.y_range))
        if self.nx < 2 or self.ny < 2:
            raise PreconditionError(f"Grid resolution must be >= 2 per axis, got {self.nx}x{self.ny}")
        for lo, hi in (self.x_range, self.y_range):
            if not lo < hi:
                raise PreconditionError(f"Grid range ({lo}, {hi}) is empty")

    @property
    def n_cells(self):
        return self.nx * self.ny

    @staticmethod
    def _axis(bounds, n):
        lo, hi = bounds
        return lo + (np.arange(n) + 0.5) * ((hi - lo) / n)

    def centers(self):
        """Cell centres in row-major order: y outer, x inner."""
        xs, ys = np.meshgrid(self._axis(self.x_range, self.nx), self._axis(self.y_range, self.ny))
        return np.column_stack([xs.ravel(), ys.ravel()])

    def describe(self):
        return {"x_range": list(self.x_range), "y_range": list(self.y_range), "nx": self.nx, "ny": self.ny}


@dataclass(frozen=True)
class Grid2D:
    geometry: GridGeometry
    # n_cells x K probabilities, or n_cells x 2 (mu, std)
    values: np.ndarray
    kind: str = CATEGORICAL

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] != self.geometry.n_cells:
            raise ShapeError(f"Grid of {self.geometry.n_cells} cells got values of shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise PreconditionError("Grid values must be finite")
        if self.kind == CATEGORICAL:
            if np.any(values < 0) or np.max(np.abs(values.sum(axis=1) - 1.0)) > 1e-10:
                raise PreconditionError("Categorical grid cells must lie in the simplex")
        elif self.kind == GAUSSIAN:
            if values.shape[1] != 2 or np.any(values[:, 1] <= 0):
                raise PreconditionError("Gaussian grid cells need (mu, std > 0)")
        else:
            raise PreconditionError(f"Unknown grid kind {self.kind!r}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def columns(self):
        if self.kind == CATEGORICAL:
            return [f"p_class{k}" for k in range(self.values.shape[1])]
        return ["mu", "std"]


def predictive_grid(predictor, x_range=DEFAULT_RANGE, y_range=DEFAULT_RANGE, resolution=DEFAULT_RESOLUTION):
    """Evaluate a predictor at every cell centre."""
    if predictor.spec.input_width != 2:
        raise ShapeError(f"Predictive grids need a 2D-input model, got {predictor.spec}")
    nx, ny = (resolution, resolution) if np.isscalar(resolution) else resolution
    geometry = GridGeometry(x_range, y_range, int(nx), int(ny))
    centers = geometry.centers()

    if predictor.is_classification:
        probs = np.exp(predictor.predict_class(centers))
        # renormalise away the rounding of exp(log p)
        return Grid2D(geometry, probs / probs.sum(axis=1, keepdims=True), CATEGORICAL)
    mu, std = predictor.predict_reg(centers)
    return Grid2D(geometry, np.column_stack([mu, std]), GAUSSIAN)


def kl_grid(reference, approx, eps=KL_EPS):
    """Mean over cells of KL(reference cell || approx cell), approx clamped at eps."""
    if reference.geometry != approx.geometry:
        raise ShapeError(f"Grid geometries differ: {reference.geometry} vs {approx.geometry}")
    if reference.kind != CATEGORICAL or approx.kind != CATEGORICAL:
        raise PreconditionError("Grid KL compares categorical grids only")
    if reference.values.shape != approx.values.shape:
        raise ShapeError(f"Class counts differ: {reference.values.shape} vs {approx.values.shape}")

    p = reference.values
    q = np.maximum(approx.values, eps)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
    return float(np.mean(terms.sum(axis=1)))


def grid_frame(grid):
    centers = grid.geometry.centers()
    frame = pd.DataFrame(grid.values, columns=grid.columns())
    frame.insert(0, "y", centers[:, 1])
    frame.insert(0, "x", centers[:, 0])
    return frame


def sidecar_path(path):
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def write_grid_csv(path, grid, **metadata):
    path = Path(path)
    atomic_write_text(path, grid_frame(grid).to_csv(index=False, float_format="%.17g"))
    meta = {
        "geometry": grid.geometry.describe(),
        "kind": grid.kind,
        "columns": ["x", "y", *grid.columns()],
        "layout": "row-major, y outer, x inner, cell centres",
        "kl_direction": KL_DIRECTION,
        "kl_eps": KL_EPS,
        **metadata,
    }
    atomic_write_text(sidecar_path(path), json.dumps(meta, indent=2, sort_keys=True) + "\n")
    logger.info(f"Wrote {grid.geometry.nx}x{grid.geometry.ny} {grid.kind} grid to {path}")
    return path


def read_grid_csv(path):
    path = Path(path)
    try:
        meta = json.loads(sidecar_path(path).read_text())
        geometry = GridGeometry(
            tuple(meta["geometry"]["x_range"]), tuple(meta["geometry"]["y_range"]),
            meta["geometry"]["nx"], meta["geometry"]["ny"],
        )
        kind = meta["kind"]
    except FileNotFoundError as e:
        raise DataFormatError(path, "missing grid sidecar metadata") from e
    except (KeyError, ValueError) as e:
        raise DataFormatError(sidecar_path(path), f"malformed grid metadata ({e})") from e

    frame = pd.read_csv(path)
    if list(frame.columns[:2]) != ["x", "y"] or len(frame) != geometry.n_cells:
        raise DataFormatError(path, f"expected {geometry.n_cells} rows starting with x, y columns")
    return Grid2D(geometry, frame.iloc[:, 2:].to_numpy(dtype=np.float64), kind)


def predictive_band(predictor, xs, noise=None):
    """Predictive mean and std along a 1D input with +-3 std error bars."""
    if predictor.spec.input_width != 1:
        raise ShapeError(f"Predictive bands need a 1D-input model, got {predictor.spec}")
    xs = np.asarray(xs, dtype=np.float64).ravel()
    mu, std = predictor.predict_reg(xs[:, None], noise)
    return pd.DataFrame({
        "x": xs,
        "mu": mu,
        "std": std,
        "lower": mu - BAND_WIDTH * std,
        "upper": mu + BAND_WIDTH * std,
    })


def write_band_csv(path, band):
    return atomic_write_text(path, band.to_csv(index=False, float_format="%.17g"))
