"""Finite-difference checks for every tape primitive and every loss.

Each case maps an input array to a scalar through one operation followed by
a fixed random linear probe, so that every output coordinate contributes a
distinct weight to the gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .objectives import cap_outer_loss, ce_loss, kl_loss, se_loss

TOLERANCE = {np.float64: 1e-5, np.float32: 1e-3}


@dataclass
class CaseResult:
    name: str
    dtype: str
    max_rel_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def _const(a):
    return ad.Tensor(a)


def _probe(t: ad.Tensor, w: np.ndarray) -> ad.Tensor:
    return ad.sum_(ad.mul(t, _const(w)))


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.uniform(-1, 1, shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-9) * margin, x) + np.sign(x) * 0.05


def _simplex(rng, shape):
    p = rng.uniform(0.05, 1.0, shape)
    return p / p.sum(axis=-1, keepdims=True)


def build_cases(seed: int = 0) -> dict[str, tuple[Callable, np.ndarray]]:
    """name -> (scalar function of one tensor, evaluation point)."""
    r = np.random.default_rng(seed)
    u = lambda *s: r.uniform(-1, 1, s)  # noqa: E731
    c = {}

    def op(name, shape_in, fn, point=None, out_shape=None):
        x0 = u(*shape_in) if point is None else point
        with ad.no_grad(), ad.precision(np.float64):
            shape_out = fn(ad.Tensor(x0)).dims if out_shape is None else out_shape
        w = u(*shape_out) if shape_out else np.array(1.0)
        c[name] = ((lambda x: _probe(fn(x), w)) if shape_out else fn, x0)

    k45, k53, k2 = u(4, 5), u(5, 3), u(2, 4, 3)
    op("add", (4, 5), lambda x: ad.add(x, _const(k45)))
    op("sub", (4, 5), lambda x: ad.sub(_const(k45), x))
    op("mul", (4, 5), lambda x: ad.mul(x, _const(k45)))
    op("scale", (4, 5), lambda x: ad.scale(x, -1.7))
    op("matmul_left", (4, 5), lambda x: ad.matmul(x, _const(k53)))
    op("matmul_right", (5, 3), lambda x: ad.matmul(_const(k45), x))
    op("matmul_batched", (2, 3, 4), lambda x: ad.matmul(x, _const(k2)))
    op("reshape", (4, 6), lambda x: ad.reshape(x, (2, 3, 4)))
    op("transpose", (2, 3, 4), lambda x: ad.transpose(x, (2, 0, 1)))
    op("broadcast_to", (1, 5), lambda x: ad.broadcast_to(x, (4, 5)))
    op("sum_axis", (4, 5), lambda x: ad.sum_(x, axis=1))
    op("sum_keepdims", (4, 5), lambda x: ad.sum_(x, axis=0, keepdims=True))
    op("mean_axis", (4, 5), lambda x: ad.mean(x, axis=0))
    op("relu", (5, 5), ad.relu, point=_away_from_zero(r, (5, 5)))
    op("gelu", (5, 5), ad.gelu, point=2 * u(5, 5))
    op("softmax", (3, 6), lambda x: ad.softmax(x, axis=-1), point=2 * u(3, 6))
    op("softmax_axis0", (4, 3), lambda x: ad.softmax(x, axis=0))
    op("log", (4, 5), ad.log, point=r.uniform(0.2, 2.0, (4, 5)))
    op("square", (4, 5), ad.square)
    wln, bln = r.uniform(0.5, 1.5, 6), u(6)
    xln = u(3, 6)
    op("layer_norm_input", (3, 6), lambda x: ad.layer_norm(x, _const(wln), _const(bln)))
    op("layer_norm_weight", (6,), lambda w: ad.layer_norm(_const(xln), w, _const(bln)), point=wln)
    op("layer_norm_bias", (6,), lambda b: ad.layer_norm(_const(xln), _const(wln), b))
    idx = np.array([[0, 2, 2], [3, 1, 0]])
    op("embedding_lookup", (4, 5), lambda t: ad.embedding_lookup(t, idx))
    k35 = u(3, 5)
    op("concat", (4, 5), lambda x: ad.concat([_const(k35), x, x], axis=0))
    op("slice", (5, 6), lambda x: ad.slice_(x, (slice(1, 4), slice(None, None, 2))))

    q, t = _simplex(r, (4, 3)), _simplex(r, (4, 3))
    y_hot = np.eye(3)[[0, 2, 1, 1]]
    pad = u(4, 3)
    c["ce_loss"] = (lambda z: ce_loss(ad.softmax(z), y_hot), 2 * u(4, 3))
    c["kl_loss_first"] = (lambda z: kl_loss(ad.softmax(z), _const(q)), 2 * u(4, 3))
    c["kl_loss_second"] = (lambda z: kl_loss(_const(q), ad.softmax(z)), 2 * u(4, 3))
    c["se_loss"] = (lambda z: se_loss(ad.softmax(z), _const(t)), 2 * u(4, 3))
    for outer in ("se", "kl"):
        c[f"cap_outer_{outer}_clean"] = (
            lambda z, o=outer: cap_outer_loss(ad.softmax(z), ad.softmax(_const(pad)), t, 6.0, o),
            2 * u(4, 3))
        c[f"cap_outer_{outer}_adv"] = (
            lambda z, o=outer: cap_outer_loss(ad.softmax(_const(pad)), ad.softmax(z), t, 6.0, o),
            2 * u(4, 3))
    return c


def run_gradchecks(dtypes=(np.float64, np.float32), seed: int = 0, h: float = 1e-6) -> list[CaseResult]:
    out = []
    for dt in dtypes:
        dt = np.dtype(dt).type
        with ad.precision(dt):
            for name, (fn, point) in build_cases(seed).items():
                rep = ad.grad_check(fn, point, h=h, tol=TOLERANCE[dt])
                out.append(CaseResult(name, np.dtype(dt).name, rep.max_rel_error, rep.tol))
    return out
