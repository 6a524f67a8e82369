"""Input checks for the estimator API and the command line."""

from __future__ import annotations

import numpy as np

from .errors import DataError, DimensionMismatchError, LabelRangeError


def as_volume_list(X, name: str = "X") -> list[np.ndarray]:
    """Accept one 3D array, a 4D stack or a sequence of 3D arrays; return float32 volumes."""
    if isinstance(X, np.ndarray) and X.ndim == 3:
        X = [X]
    elif isinstance(X, np.ndarray) and X.ndim == 4:
        X = list(X)
    vols = []
    for i, v in enumerate(X):
        v = np.asarray(v)
        if v.ndim != 3:
            raise DimensionMismatchError(f"{name}[{i}] must be a 3D volume, got shape {v.shape}")
        if not np.issubdtype(v.dtype, np.number):
            raise DataError(f"{name}[{i}] has non-numeric dtype {v.dtype}")
        vols.append(v)
    if not vols:
        raise DataError(f"{name} is empty")
    return vols


def check_intensities(X) -> list[np.ndarray]:
    vols = [v.astype(np.float32, copy=False) for v in as_volume_list(X, "X")]
    for i, v in enumerate(vols):
        if not np.isfinite(v).all():
            raise DataError(f"X[{i}] contains non-finite values")
    return vols


def check_labels(y, num_classes: int | None = None) -> list[np.ndarray]:
    labs = as_volume_list(y, "y")
    out = []
    for i, lab in enumerate(labs):
        if not np.issubdtype(lab.dtype, np.integer):
            if not np.array_equal(lab, np.round(lab)):
                raise DataError(f"y[{i}] holds non-integer labels")
        lab = lab.astype(np.int64)
        if lab.min() < 0 or (num_classes is not None and lab.max() >= num_classes):
            raise LabelRangeError(f"y[{i}] labels span [{lab.min()}, {lab.max()}], "
                                  f"expected [0, {num_classes})")
        out.append(lab)
    return out


def check_volume_pairs(X, y, num_classes: int | None = None):
    vols = check_intensities(X)
    labs = check_labels(y, num_classes)
    if len(vols) != len(labs):
        raise DataError(f"{len(vols)} volumes but {len(labs)} label maps")
    for i, (v, lab) in enumerate(zip(vols, labs)):
        if v.shape != lab.shape:
            raise DimensionMismatchError(f"volume {i}: X shape {v.shape} != y shape {lab.shape}")
    return vols, labs


def check_in_plane(vols, axis: int, input_size) -> None:
    for i, v in enumerate(vols):
        plane = tuple(d for a, d in enumerate(v.shape) if a != axis)
        if plane != tuple(input_size):
            raise DimensionMismatchError(
                f"volume {i}: in-plane dims {plane} differ from the fitted size {tuple(input_size)}")
