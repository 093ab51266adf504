"""Input checks shared by the estimator and the command line."""

from __future__ import annotations

import os

import numpy as np

from .data.manifest import Dataset
from .errors import DimensionError, InputError


def check_dataset(X):
    """Accept a Dataset, a manifest path, or a dataset directory."""
    if isinstance(X, Dataset):
        ds = X
    elif isinstance(X, (str, os.PathLike)):
        if not os.path.exists(X):
            raise InputError(f"no dataset at {X}")
        ds = Dataset.load(X)
    else:
        raise InputError(f"expected a Dataset or a manifest path, got {type(X).__name__}")
    if len(ds) == 0:
        raise InputError("dataset is empty")
    return ds


def check_split(ds, split):
    samples = list(ds) if split in (None, "all") else ds.split(split)
    if not samples:
        raise InputError(f"split {split!r} is empty")
    return samples


def check_boxes(boxes, name="boxes", length=None):
    """Float array N x T x 4 with ordered corners."""
    arr = np.asarray(boxes, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[-1] != 4:
        raise DimensionError(f"{name} must be N x T x 4, got {arr.shape}")
    if length is not None and arr.shape[1] != length:
        raise DimensionError(f"{name} must have {length} steps, got {arr.shape[1]}")
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{name} contains non-finite values")
    if np.any(arr[..., 0] > arr[..., 2]) or np.any(arr[..., 1] > arr[..., 3]):
        raise InputError(f"{name}: corners must satisfy x1 <= x2 and y1 <= y2")
    return arr


def check_binary(labels, name="labels"):
    y = np.asarray(labels)
    if not np.all((y == 0) | (y == 1)):
        raise InputError(f"{name} must be 0 or 1")
    return y.astype(np.int64)
