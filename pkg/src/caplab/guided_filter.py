"""Self-guided edge-preserving filter.

Each ``s x s`` window fits a local linear model of the image on itself;
flat windows collapse to their mean while high-variance windows (edges,
contours) pass through almost unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_images


@dataclass(frozen=True)
class FilterConfig:
    window_size: int = 5
    t: float = 0.003

    def __post_init__(self):
        if self.window_size < 3 or self.window_size % 2 == 0:
            raise ValueError(f"window_size must be odd and >= 3, got {self.window_size}")
        if not self.t > 0:
            raise ValueError(f"t must be positive, got {self.t}")


def _check_fits(x: np.ndarray, s: int):
    if s < 1 or s % 2 == 0:
        raise ValueError(f"window size must be odd and positive, got {s}")
    if x.shape[-2] < s or x.shape[-1] < s:
        raise ValueError(f"image {x.shape[-2:]} is smaller than the {s}x{s} window")


def box_mean(x, s: int) -> np.ndarray:
    """Mean over the ``s x s`` window centred on each pixel (edge replication).

    Accepts a single ``(H, W)`` image or a ``(B, H, W)`` stack.
    """
    x = np.asarray(x, dtype=np.float64)
    _check_fits(x, s)
    size = (1,) * (x.ndim - 2) + (s, s)
    return uniform_filter(x, size=size, mode="nearest")


def self_guided_filter(x, cfg: FilterConfig | None = None) -> np.ndarray:
    """Filter ``x`` using itself as the guidance image; output clamped to [0, 1]."""
    cfg = cfg or FilterConfig()
    x = np.asarray(x, dtype=np.float64)
    s = cfg.window_size
    _check_fits(x, s)
    mu = box_mean(x, s)
    var = np.maximum(box_mean(x * x, s) - mu * mu, 0.0)
    a = var / (var + cfg.t)
    b = (1.0 - a) * mu
    out = box_mean(a, s) * x + box_mean(b, s)
    return np.clip(out, 0.0, 1.0)


class SelfGuidedFilter(TransformerMixin, BaseEstimator):
    """Transformer wrapper around :func:`self_guided_filter`.

    Stateless: ``fit`` only validates the input so the filter can sit in a
    :class:`sklearn.pipeline.Pipeline`.
    """

    def __init__(self, window_size=5, t=0.003):
        self.window_size = window_size
        self.t = t

    def fit(self, X, y=None):
        X = check_images(X)
        FilterConfig(self.window_size, self.t)
        self.image_shape_ = X.shape[1:]
        return self

    def transform(self, X):
        check_is_fitted(self, "image_shape_")
        X = check_images(X)
        return self_guided_filter(X, FilterConfig(self.window_size, self.t))
