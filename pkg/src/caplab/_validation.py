"""Input validation shared by the estimators and the CLI."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array


def check_images(X, dtype=np.float64, square: bool = False) -> np.ndarray:
    """Validate a stack of grayscale images in [0, 1].

    A single ``(H, W)`` image is promoted to a batch of one.
    """
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=dtype)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise ValueError(f"expected images shaped (n, H, W), got {X.shape}")
    if X.size and (X.min() < 0.0 or X.max() > 1.0):
        raise ValueError("pixel values must lie in [0, 1]")
    if square and X.shape[1] != X.shape[2]:
        raise ValueError(f"expected square images, got {X.shape[1:]}")
    return X


def check_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n:
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    return y
