"""
Ingestion of regression CSV files (Boston housing) and MNIST IDX files.
"""
import logging
import re
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np
import pandas as pd

from lab.exceptions import DataFormatError, PreconditionError
from .dataset import ColumnStats, Dataset

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
PIXEL_SCALE = 126.0
MNIST_CLASSES = 10


@dataclass(frozen=True)
class SplitSpec:
    train_n: int
    test_n: int
    seed: int = 0


@dataclass(frozen=True)
class MnistSplit:
    train_n: int = 50000
    valid_n: int = 10000


@dataclass(frozen=True)
class MnistDatasets:
    train: Dataset
    valid: Optional[Dataset] = None


# ======================================================================
# CSV (regression)
# ======================================================================
def _has_header(path):
    with open(path, "r") as handle:
        first = handle.readline()
    for token in first.strip().split(","):
        try:
            float(token)
        except ValueError:
            return True
    return False


def _read_numeric_frame(path):
    header = _has_header(path)
    try:
        frame = pd.read_csv(
            path,
            header=0 if header else None,
            dtype=str,
            keep_default_na=False,
            skipinitialspace=True,
            skip_blank_lines=False,
        )
    except pd.errors.ParserError as e:
        match = re.search(r"line (\d+)", str(e))
        line = int(match.group(1)) if match else None
        raise DataFormatError(path, f"row/column mismatch ({e})", line=line) from e
    except pd.errors.EmptyDataError as e:
        raise DataFormatError(path, "file holds no rows") from e

    # entirely empty rows (blank lines) carry no data
    frame = frame[~frame.replace("", np.nan).isna().all(axis=1)]
    numeric = frame.apply(pd.to_numeric, errors="coerce")
    bad = ~np.isfinite(numeric.to_numpy(dtype=np.float64, na_value=np.nan))
    if bad.any():
        row_pos, col_pos = np.argwhere(bad)[0]
        line = int(frame.index[row_pos]) + 1 + (1 if header else 0)
        value = frame.iat[row_pos, col_pos]
        raise DataFormatError(
            path, f"non-numeric or missing field {value!r} in column {frame.columns[col_pos]}", line=line
        )
    if numeric.empty:
        raise DataFormatError(path, "file holds no rows")
    return numeric


def load_csv_regression(path, target_column, split, standardize_targets=True):
    """Shuffle, split and standardise a regression CSV using train-split statistics only."""
    frame = _read_numeric_frame(path)

    if isinstance(target_column, str) and target_column in frame.columns:
        target_key = target_column
    else:
        position = int(target_column)
        if not -frame.shape[1] <= position < frame.shape[1]:
            raise DataFormatError(path, f"target column {target_column} out of range for {frame.shape[1]} columns")
        target_key = frame.columns[position]

    targets = frame[target_key].to_numpy(dtype=np.float64)
    inputs = frame.drop(columns=[target_key]).to_numpy(dtype=np.float64)

    n_rows = len(targets)
    if split.train_n < 1 or split.test_n < 1 or split.train_n + split.test_n > n_rows:
        raise PreconditionError(
            f"Split {split.train_n}/{split.test_n} does not fit {n_rows} rows in {path}"
        )

    order = np.random.default_rng(split.seed).permutation(n_rows)
    train_idx = order[:split.train_n]
    test_idx = order[split.train_n:split.train_n + split.test_n]

    input_stats = ColumnStats.fit(inputs[train_idx])
    target_stats = ColumnStats.fit(targets[train_idx, None]) if standardize_targets else None

    def build(indices):
        y = targets[indices]
        if target_stats is not None:
            y = target_stats.apply(y[:, None])[:, 0]
        return Dataset(
            input_stats.apply(inputs[indices]),
            y,
            input_stats=input_stats,
            target_stats=target_stats,
        )

    logger.info(f"Loaded {path}: {n_rows} rows, {inputs.shape[1]} features, split {split.train_n}/{split.test_n}")
    return build(train_idx), build(test_idx)


# ======================================================================
# IDX (MNIST)
# ======================================================================
def _read_idx(path, magic, n_dims):
    with open(path, "rb") as handle:
        buffer = handle.read()

    header_size = 4 * (1 + n_dims)
    if len(buffer) < header_size:
        raise DataFormatError(path, "truncated IDX header")
    found, *dims = struct.unpack_from(f">I{n_dims}I", buffer, 0)
    if found != magic:
        raise DataFormatError(path, f"bad IDX magic 0x{found:08x}, expected 0x{magic:08x}")

    expected = int(np.prod(dims))
    payload = np.frombuffer(buffer, dtype=np.uint8, offset=header_size)
    if payload.shape[0] < expected:
        raise DataFormatError(path, f"truncated IDX payload: {payload.shape[0]} of {expected} bytes")
    return payload[:expected].reshape(dims)


def read_idx_images(path):
    images = _read_idx(path, IDX_IMAGES_MAGIC, 3)
    return images.reshape(images.shape[0], -1)


def read_idx_labels(path):
    return _read_idx(path, IDX_LABELS_MAGIC, 1)


def load_mnist_idx(images_path, labels_path, subset=None, split=None, seed=0):
    """Pixels scaled by 1/126. With a split, a seeded shuffle puts validation rows last."""
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(
            labels_path, f"{images.shape[0]} images but {labels.shape[0]} labels"
        )
    if labels.size and labels.max() >= MNIST_CLASSES:
        raise DataFormatError(labels_path, f"label {labels.max()} outside 0..9")

    inputs = images.astype(np.float64) / PIXEL_SCALE
    n_rows = inputs.shape[0]

    if split is None:
        train_idx, valid_idx = np.arange(n_rows), None
    else:
        if split.train_n + split.valid_n > n_rows:
            raise PreconditionError(f"Split {split.train_n}/{split.valid_n} exceeds {n_rows} images")
        order = np.random.default_rng(seed).permutation(n_rows)
        train_idx = order[:split.train_n]
        valid_idx = order[split.train_n:split.train_n + split.valid_n] if split.valid_n else None

    if subset is not None:
        train_idx = train_idx[:subset]

    train = Dataset(inputs[train_idx], labels[train_idx], n_classes=MNIST_CLASSES)
    valid = None if valid_idx is None else Dataset(inputs[valid_idx], labels[valid_idx], n_classes=MNIST_CLASSES)
    logger.info(f"Loaded {images_path}: train {len(train)}, valid {0 if valid is None else len(valid)}")
    return MnistDatasets(train, valid)
