"""Losses over batches of class distributions.

Every loss takes ``(B, C)`` probability tensors (or arrays) and reduces with
a sum over classes followed by ``reduction`` over the batch ("mean",
"sum" or "none").

For KL, ``metric(pred, target)`` means ``KL(target || pred)``, so the
``(kl, kl)`` combination of :func:`cap_outer_loss` with hard labels is
exactly the TRADES objective ``CE(f(x), y) + beta * KL(f(x) || f(x'))``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

METRICS = ("se", "kl")


@dataclass(frozen=True)
class MetricCombo:
    outer: str = "se"
    inner: str = "kl"

    def __post_init__(self):
        if self.outer not in METRICS or self.inner not in METRICS:
            raise ValueError(f"metrics must be in {METRICS}, got ({self.outer}, {self.inner})")

    @property
    def label(self) -> str:
        return f"{self.outer}/{self.inner}"


def _pair(p, q, op):
    p, q = ad.as_tensor(p), ad.as_tensor(q)
    if p.dims != q.dims:
        raise ShapeError(f"{op}: dimension mismatch between {p.dims} and {q.dims}")
    if p.data.ndim == 1:
        p, q = ad.reshape(p, (1,) + p.dims), ad.reshape(q, (1,) + q.dims)
    return p, q


def _reduce(per_sample: Tensor, reduction: str) -> Tensor:
    if reduction == "mean":
        return ad.mean(per_sample)
    if reduction == "sum":
        return ad.sum_(per_sample)
    if reduction == "none":
        return per_sample
    raise ValueError(f"unknown reduction {reduction!r}")


def se_loss(p, target, reduction: str = "mean") -> Tensor:
    """Squared error ``sum_c (p_c - target_c)^2``."""
    p, target = _pair(p, target, "se_loss")
    return _reduce(ad.sum_(ad.square(ad.sub(p, target)), axis=1), reduction)


def kl_loss(p, q, reduction: str = "mean") -> Tensor:
    """``KL(p || q) = sum_c p_c (log p_c - log q_c)``; logs clamp at 1e-12."""
    p, q = _pair(p, q, "kl_loss")
    return _reduce(ad.sum_(ad.mul(p, ad.sub(ad.log(p), ad.log(q))), axis=1), reduction)


def ce_loss(p, y, reduction: str = "mean") -> Tensor:
    """Cross-entropy ``-sum_c y_c log p_c`` against one-hot or soft labels."""
    p, y = _pair(p, y, "ce_loss")
    return _reduce(ad.scale(ad.sum_(ad.mul(y, ad.log(p)), axis=1), -1.0), reduction)


def distance(metric: str, pred, target, reduction: str = "mean") -> Tensor:
    if metric == "se":
        return se_loss(pred, target, reduction)
    if metric == "kl":
        return kl_loss(target, pred, reduction)
    raise ValueError(f"unknown metric {metric!r}")


def cap_outer_loss(
    p_clean,
    p_adv,
    y_soft,
    beta: float,
    combo: MetricCombo | str = "se",
    adv_target: str = "clean",
    reduction: str = "mean",
) -> Tensor:
    """``metric(p_clean, y_soft) + beta * metric(p_adv, p_clean)``.

    ``adv_target="label"`` swaps the second target for ``y_soft``.
    With ``se`` the per-sample value lies in ``[0, 2 + 2 beta]``.
    """
    if beta < 0:
        raise ValueError("beta must be non-negative")
    outer = combo.outer if isinstance(combo, MetricCombo) else combo
    natural = distance(outer, p_clean, y_soft, reduction)
    if adv_target == "clean":
        robust = distance(outer, p_adv, p_clean, reduction)
    elif adv_target == "label":
        robust = distance(outer, p_adv, y_soft, reduction)
    else:
        raise ValueError(f"unknown adv_target {adv_target!r}")
    return ad.add(natural, ad.scale(robust, beta))


def one_hot(y, num_classes: int, dtype=None) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    out = np.zeros((len(y), num_classes), dtype=dtype or ad.default_dtype())
    out[np.arange(len(y)), y] = 1
    return out


@dataclass
class BoundReport:
    n_samples: int
    beta: float
    num_classes: int
    min_value: float
    max_value: float
    upper_bound: float
    violations: int
    counterexample: tuple | None
    decomposition_max_rel_error: float
    worst_case_value: float

    @property
    def passed(self) -> bool:
        return self.violations == 0


def worst_case_triple(num_classes: int = 2):
    """Clean prediction one-hot on the wrong class, adversarial one-hot opposite."""
    y = np.zeros((1, num_classes))
    y[0, 0] = 1.0
    p_clean = np.zeros((1, num_classes))
    p_clean[0, 1] = 1.0
    return p_clean, y.copy(), y


def bound_check(n_samples: int = 100_000, beta: float = 6.0, seed: int = 0,
                num_classes: int = 2) -> BoundReport:
    """Sweep random simplex triples and check ``0 <= L_out <= 2 + 2 beta`` (SE outer).

    Also checks that ``sum_c (p_c - onehot_c)^2`` equals
    ``(1 - p_y)^2 + sum_{c != y} p_c^2`` sample by sample.
    """
    rng = np.random.default_rng(seed)
    alpha = np.ones(num_classes)
    p_clean = rng.dirichlet(alpha, n_samples)
    p_adv = rng.dirichlet(alpha, n_samples)
    y_soft = rng.dirichlet(alpha, n_samples)
    # a slice of the sweep sits on simplex vertices, where the bound is tight
    k = n_samples // 10
    verts = np.eye(num_classes)
    p_clean[:k] = verts[rng.integers(num_classes, size=k)]
    p_adv[:k] = verts[rng.integers(num_classes, size=k)]
    y_soft[:k] = verts[rng.integers(num_classes, size=k)]

    with ad.precision(np.float64), ad.no_grad():
        vals = cap_outer_loss(p_clean, p_adv, y_soft, beta, "se", reduction="none").data
        pc, pa, ys = worst_case_triple(num_classes)
        worst = cap_outer_loss(pc, pa, ys, beta, "se").item()

        labels = rng.integers(num_classes, size=n_samples)
        direct = se_loss(p_clean, one_hot(labels, num_classes), reduction="none").data
    p_true = p_clean[np.arange(n_samples), labels]
    rival = np.where(one_hot(labels, num_classes, np.float64) > 0, 0.0, p_clean**2).sum(axis=1)
    decomposed = (1.0 - p_true) ** 2 + rival
    rel = np.abs(direct - decomposed) / np.maximum(np.abs(direct), 1e-300)

    upper = 2.0 + 2.0 * beta
    bad = np.flatnonzero((vals < 0) | (vals > upper))
    counter = None
    if bad.size:
        i = int(bad[0])
        counter = (p_clean[i].tolist(), p_adv[i].tolist(), y_soft[i].tolist(), float(vals[i]))
    return BoundReport(
        n_samples=n_samples,
        beta=beta,
        num_classes=num_classes,
        min_value=float(vals.min()),
        max_value=float(vals.max()),
        upper_bound=upper,
        violations=int(bad.size),
        counterexample=counter,
        decomposition_max_rel_error=float(rel.max()),
        worst_case_value=worst,
    )
