"""Attention parameter regularisation.

A mirror of the current model (the surrogate) scores how far the prediction
on the filtered image drifts from the prediction on the original. The
gradient of that surrogate loss on the attention weights, rescaled to a
fixed fraction of each weight's norm, becomes additive weight noise that is
injected into the target model for one adversarial update and removed
again before the optimiser step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .objectives import ce_loss, kl_loss, one_hot


@dataclass(frozen=True)
class AprConfig:
    enabled: bool = True
    gamma: float = 1e-4
    beta_sur: float | None = None  # None: reuse the outer beta
    lambda_soft: float = 8 / 255
    use_lr_as_eta: bool = True
    normalization: str = "layer"

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if not 0.0 <= self.lambda_soft <= 1.0:
            raise ValueError("lambda_soft must lie in [0, 1]")
        if self.normalization not in ("layer", "global"):
            raise ValueError("normalization must be 'layer' or 'global'")


@dataclass
class AttentionNoise:
    tensors: list[np.ndarray]
    eta: float
    gamma: float
    alpha_norms: list[float] = field(default_factory=list)

    @property
    def noise_norms(self) -> list[float]:
        return [float(np.linalg.norm(t.astype(np.float64))) for t in self.tensors]

    def scaled(self, factor: float) -> "AttentionNoise":
        return AttentionNoise([t * t.dtype.type(factor) for t in self.tensors], self.eta,
                              self.gamma * factor, list(self.alpha_norms))


def surrogate_loss(surrogate, x, x_tilde, y, beta_sur: float) -> tuple[Tensor, np.ndarray]:
    """``CE(f(x), y) - beta_sur * KL(f(x_tilde) || f(x))`` on the surrogate.

    Returns the loss and the detached prediction on ``x_tilde``.
    """
    x = np.asarray(x, dtype=surrogate.dtype)
    x_tilde = np.asarray(x_tilde, dtype=surrogate.dtype)
    if x.shape != x_tilde.shape:
        raise ad.ShapeError(f"surrogate_loss: dimension mismatch between {x.shape} and {x_tilde.shape}")
    p = ad.softmax(surrogate(x))
    p_tilde = ad.softmax(surrogate(x_tilde))
    y_hot = one_hot(y, p.dims[1], p.data.dtype)
    loss = ce_loss(p, y_hot)
    if beta_sur:
        loss = ad.sub(loss, ad.scale(kl_loss(p_tilde, p), beta_sur))
    return loss, p_tilde.data.copy()


def compute_noise(surrogate, grads: list[np.ndarray], eta: float, gamma: float,
                  normalization: str = "layer") -> AttentionNoise:
    """``xi_l = eta * g_l / ||g_l|| * gamma * ||alpha_l||`` for each attention weight.

    ``grads`` are the surrogate-loss gradients aligned with
    ``surrogate.attention_weight_handles()``. Zero-gradient layers get zero
    noise. With ``normalization="global"`` one norm over all layers is used
    and ``||alpha||`` is the global weight norm.
    """
    handles = surrogate.attention_weight_handles()
    if len(grads) != len(handles):
        raise ValueError(f"expected {len(handles)} gradients, got {len(grads)}")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite surrogate gradient")
    g64 = [np.asarray(g, dtype=np.float64) for g in grads]
    a_norms = [float(np.linalg.norm(h.data.astype(np.float64))) for h in handles]
    out = []
    if normalization == "layer":
        for g, a, h in zip(g64, a_norms, handles):
            gn = np.linalg.norm(g)
            xi = np.zeros_like(g) if gn == 0 else eta * (g / gn) * gamma * a
            out.append(xi.astype(h.data.dtype))
    else:
        gn = float(np.sqrt(sum(float((g * g).sum()) for g in g64)))
        an = float(np.sqrt(sum(a * a for a in a_norms)))
        for g, h in zip(g64, handles):
            xi = np.zeros_like(g) if gn == 0 else eta * (g / gn) * gamma * an
            out.append(xi.astype(h.data.dtype))
    return AttentionNoise(out, eta, gamma, a_norms)


def _aligned(model, noise: AttentionNoise):
    handles = model.attention_weight_handles()
    if len(handles) != len(noise.tensors):
        raise ValueError(f"noise has {len(noise.tensors)} tensors, model has {len(handles)} handles")
    for h, xi in zip(handles, noise.tensors):
        if h.dims != xi.shape:
            raise ValueError(f"noise shape {xi.shape} does not match handle {h.dims}")
    return handles


def inject(model, noise: AttentionNoise):
    for h, xi in zip(_aligned(model, noise), noise.tensors):
        h.data = h.data + xi


def restore(model, noise: AttentionNoise):
    for h, xi in zip(_aligned(model, noise), noise.tensors):
        h.data = h.data - xi


def soft_label(p_tilde, y, lambda_soft: float, num_classes: int | None = None) -> np.ndarray:
    """``lambda * f(x_tilde) + (1 - lambda) * y``; ``y`` may be integer labels or one-hot."""
    if not 0.0 <= lambda_soft <= 1.0:
        raise ValueError("lambda_soft must lie in [0, 1]")
    p_tilde = np.asarray(p_tilde.data if isinstance(p_tilde, Tensor) else p_tilde)
    y = np.asarray(y)
    if y.ndim == 1:
        y = one_hot(y, num_classes or p_tilde.shape[1], p_tilde.dtype)
    if y.shape != p_tilde.shape:
        raise ad.ShapeError(f"soft_label: dimension mismatch between {p_tilde.shape} and {y.shape}")
    lam = p_tilde.dtype.type(lambda_soft)
    return lam * p_tilde + (1 - lam) * y.astype(p_tilde.dtype)


def attention_noise_step(model, x, x_tilde, y, beta_sur: float, eta: float, gamma: float,
                         normalization: str = "layer") -> tuple[AttentionNoise, np.ndarray]:
    """Mirror ``model``, back-propagate the surrogate loss and return (noise, f(x_tilde))."""
    surrogate = model.mirror()
    loss, p_tilde = surrogate_loss(surrogate, x, x_tilde, y, beta_sur)
    grads = ad.grad(loss, surrogate.attention_weight_handles())
    return compute_noise(surrogate, grads, eta, gamma, normalization), p_tilde
