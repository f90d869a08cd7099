"""Input checks shared by the estimators and the harness."""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .imaging import normalize


def check_images(X, expected_shape: tuple[int, int, int] | None = None) -> np.ndarray:
    """Return a float64 (N, C, H, W) batch in [0, 1].

    uint8 input is normalized by 1/255; float input must already be in [0, 1].
    """
    X = np.asarray(X)
    if X.ndim != 4:
        raise ShapeError(f"expected images shaped (N, C, H, W), got {X.ndim}-D array {X.shape}")
    if X.shape[0] == 0:
        raise ShapeError("no images given")
    if expected_shape is not None and X.shape[1:] != tuple(expected_shape):
        raise ShapeError(f"image shape {X.shape[1:]} does not match fitted shape {tuple(expected_shape)}")
    if X.dtype == np.uint8:
        return normalize(X)
    if not np.issubdtype(X.dtype, np.number):
        raise ValueError(f"images must be numeric, got dtype {X.dtype}")
    X = X.astype(np.float64)
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain NaN or Inf")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError("float images must be normalized to [0, 1] (pass uint8 to normalize automatically)")
    return X


def check_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n:
        raise ShapeError(f"expected {n} labels in a 1-D array, got shape {y.shape}")
    return y
