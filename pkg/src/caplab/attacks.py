"""White-box l-infinity attacks: FGSM, R-FGSM, PGD, MIM and the KL inner maximisation.

A "model" is any callable mapping an input :class:`~caplab.autodiff.Tensor`
of shape ``(B, H, W)`` to logits ``(B, C)``. Attacks only take gradients
with respect to the input; model weights and their ``.grad`` are never
touched.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .objectives import ce_loss, kl_loss, one_hot, se_loss

METHODS = ("fgsm", "rfgsm", "pgd", "mim")


class AttackError(RuntimeError):
    pass


@dataclass(frozen=True)
class AttackSpec:
    method: str = "pgd"
    epsilon: float = 8 / 255
    step_size: float = 2 / 255
    steps: int = 10
    momentum: float = 1.0
    loss: str = "ce"
    random_start: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown attack method {self.method!r}")
        if not 0 < self.epsilon <= 1:
            raise ValueError("epsilon must lie in (0, 1]")
        if self.method in ("pgd", "mim") and not 0 < self.step_size <= self.epsilon:
            raise ValueError("step_size must lie in (0, epsilon]")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.loss not in ("ce", "kl"):
            raise ValueError(f"unknown attack loss {self.loss!r}")


def _dtype_of(model):
    return getattr(model, "dtype", ad.default_dtype())


def _input_grad(model, x: np.ndarray, objective: Callable[[Tensor], Tensor]) -> np.ndarray:
    xt = Tensor(x, requires_grad=True, dtype=_dtype_of(model))
    loss = objective(ad.softmax(model(xt)))
    if loss._node is None:
        return np.zeros_like(xt.data)
    g = ad.grad(loss, [xt])[0]
    if not np.all(np.isfinite(g)):
        raise AttackError("non-finite input gradient")
    return g


def _project(x_adv, x, eps):
    return np.clip(np.clip(x_adv, x - eps, x + eps), 0.0, 1.0)


def _ce_objective(y):
    def objective(p):
        return ce_loss(p, one_hot(y, p.dims[1], p.data.dtype), reduction="sum")

    return objective


def _clean_probs(model, x):
    with ad.no_grad():
        return ad.softmax(model(Tensor(x, dtype=_dtype_of(model)))).data


def _divergence_objective(p_clean, metric, reverse=False):
    def objective(p):
        if metric == "kl":
            return kl_loss(p, p_clean, "sum") if reverse else kl_loss(p_clean, p, "sum")
        if metric == "se":
            return se_loss(p, p_clean, "sum")
        raise ValueError(f"unknown inner metric {metric!r}")

    return objective


def _objective(model, x, y, spec):
    if spec.loss == "kl":
        return _divergence_objective(_clean_probs(model, x), "kl")
    return _ce_objective(y)


def _ascent(model, x, objective, x_start, eps, step, steps, momentum=None, on_step=None):
    x_adv = x_start
    g_acc = np.zeros_like(x)
    for i in range(steps):
        g = _input_grad(model, x_adv, objective)
        if momentum is not None:
            l1 = np.abs(g).reshape(len(g), -1).sum(axis=1).reshape((-1,) + (1,) * (g.ndim - 1))
            g_acc = momentum * g_acc + g / np.maximum(l1, 1e-12)
            g = g_acc
        x_adv = _project(x_adv + step * np.sign(g), x, eps).astype(x.dtype)
        if on_step is not None:
            on_step(i, x_adv)
    return x_adv


def _prep(model, x):
    x = np.asarray(x, dtype=_dtype_of(model))
    if x.size and (x.min() < 0 or x.max() > 1):
        raise ValueError("inputs must lie in [0, 1]")
    return x


def fgsm(model, x, y, spec: AttackSpec | None = None) -> np.ndarray:
    spec = spec or AttackSpec(method="fgsm")
    x = _prep(model, x)
    g = _input_grad(model, x, _objective(model, x, y, spec))
    return _project(x + spec.epsilon * np.sign(g), x, spec.epsilon).astype(x.dtype)


def rfgsm(model, x, y, spec: AttackSpec | None = None, rng=None) -> np.ndarray:
    """Random sign step of eps/2, then an FGSM step of eps/2."""
    spec = spec or AttackSpec(method="rfgsm")
    rng = rng if rng is not None else np.random.default_rng(0)
    x = _prep(model, x)
    alpha = spec.epsilon / 2
    x_hat = np.clip(x + alpha * np.sign(rng.standard_normal(x.shape)), 0.0, 1.0).astype(x.dtype)
    g = _input_grad(model, x_hat, _objective(model, x, y, spec))
    return _project(x_hat + (spec.epsilon - alpha) * np.sign(g), x, spec.epsilon).astype(x.dtype)


def pgd(model, x, y, spec: AttackSpec | None = None, rng=None, random_start: bool | None = None,
        on_step=None) -> np.ndarray:
    spec = spec or AttackSpec()
    x = _prep(model, x)
    start = spec.random_start if random_start is None else random_start
    x0 = x
    if start:
        rng = rng if rng is not None else np.random.default_rng(0)
        x0 = _project(x + rng.uniform(-spec.epsilon, spec.epsilon, x.shape), x, spec.epsilon).astype(x.dtype)
    return _ascent(model, x, _objective(model, x, y, spec), x0, spec.epsilon, spec.step_size,
                   spec.steps, on_step=on_step)


def mim(model, x, y, spec: AttackSpec | None = None, on_step=None) -> np.ndarray:
    """Momentum iterative attack: ``g <- mu g + grad / ||grad||_1``, sign steps."""
    spec = spec or AttackSpec(method="mim")
    x = _prep(model, x)
    return _ascent(model, x, _objective(model, x, y, spec), x, spec.epsilon, spec.step_size,
                   spec.steps, momentum=spec.momentum, on_step=on_step)


def inner_max(model, x, spec: AttackSpec | None = None, metric: str = "kl", start_scale: float = 0.25,
              rng=None, labels=None, reverse: bool = False, on_step=None,
              p_clean=None) -> np.ndarray:
    """Maximise the divergence between ``f(x)`` (held fixed) and ``f(x + delta)``.

    ``metric`` is ``"kl"`` (``KL(f(x) || f(x+delta))``; ``reverse`` flips it),
    ``"se"``, or ``"ce"`` against ``labels`` (defaults to the clean argmax).
    The start point is uniform in ``[-start_scale*eps, start_scale*eps]``.
    ``p_clean`` may be passed when the caller already holds ``f(x)``.
    """
    spec = spec or AttackSpec(random_start=False)
    x = _prep(model, x)
    p_clean = _clean_probs(model, x) if p_clean is None else np.asarray(p_clean)
    if metric == "ce":
        y = p_clean.argmax(axis=1) if labels is None else labels
        objective = _ce_objective(y)
    else:
        objective = _divergence_objective(p_clean, metric, reverse)
    x0 = x
    if start_scale > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        r = start_scale * spec.epsilon
        x0 = _project(x + rng.uniform(-r, r, x.shape), x, spec.epsilon).astype(x.dtype)
    return _ascent(model, x, objective, x0, spec.epsilon, spec.step_size, spec.steps, on_step=on_step)


def inner_max_kl(model, x, spec: AttackSpec | None = None, **kw) -> np.ndarray:
    return inner_max(model, x, spec, metric="kl", **kw)


def attack(model, x, y, spec: AttackSpec, rng=None) -> np.ndarray:
    if spec.method == "fgsm":
        return fgsm(model, x, y, spec)
    if spec.method == "rfgsm":
        return rfgsm(model, x, y, spec, rng)
    if spec.method == "pgd":
        return pgd(model, x, y, spec, rng)
    return mim(model, x, y, spec)


def adversarial_predictions(model, x, y, spec: AttackSpec, seed: int = 0,
                            batch_size: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Clean and attacked predictions, batch by batch in index order."""
    x = np.asarray(x)
    y = np.asarray(y)
    rng = np.random.default_rng(seed)
    clean, adv = [], []
    for i in range(0, len(x), batch_size):
        xb, yb = x[i:i + batch_size], y[i:i + batch_size]
        xa = attack(model, xb, yb, spec, rng)
        clean.append(_clean_probs(model, _prep(model, xb)).argmax(axis=1))
        adv.append(_clean_probs(model, xa).argmax(axis=1))
    return np.concatenate(clean), np.concatenate(adv)


def with_steps(spec: AttackSpec, steps: int) -> AttackSpec:
    return replace(spec, steps=steps)
