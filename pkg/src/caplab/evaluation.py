"""Classification metrics, corruption error aggregates and gradient saliency."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from ._csvio import write_csv
from .attacks import AttackSpec, adversarial_predictions
from .data import CORRUPTIONS, CorruptionSpec, corrupt

SEVERITIES = (1, 2, 3, 4, 5)


@dataclass(frozen=True)
class ConfusionTally:
    """One-vs-rest counts per class."""

    tp: np.ndarray
    fp: np.ndarray
    tn: np.ndarray
    fn: np.ndarray

    @classmethod
    def from_predictions(cls, preds, labels, num_classes: int | None = None) -> "ConfusionTally":
        preds = np.asarray(preds, dtype=np.int64)
        labels = np.asarray(labels, dtype=np.int64)
        if preds.shape != labels.shape or preds.ndim != 1:
            raise ValueError(f"preds {preds.shape} and labels {labels.shape} must be equal-length vectors")
        if len(preds) == 0:
            raise ValueError("cannot score an empty prediction set")
        k = num_classes or int(max(preds.max(), labels.max())) + 1
        cm = np.zeros((k, k), dtype=np.int64)  # rows: truth, cols: prediction
        np.add.at(cm, (labels, preds), 1)
        tp = np.diag(cm).copy()
        fp = cm.sum(axis=0) - tp
        fn = cm.sum(axis=1) - tp
        tn = len(preds) - tp - fp - fn
        return cls(tp, fp, tn, fn)

    @property
    def total(self) -> int:
        return int(self.tp[0] + self.fp[0] + self.tn[0] + self.fn[0])


def _ratio(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    out = np.full(num.shape, np.nan)
    ok = den > 0
    out[ok] = num[ok] / den[ok]
    return out


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    specificity: np.ndarray
    f1: np.ndarray
    tally: ConfusionTally

    def rows(self):
        return [[c, self.accuracy, float(self.specificity[c]), float(self.f1[c])]
                for c in range(len(self.f1))]


def metrics(preds, labels, num_classes: int | None = None) -> Metrics:
    """Accuracy plus per-class specificity and F1; empty denominators give NaN."""
    t = ConfusionTally.from_predictions(preds, labels, num_classes)
    acc = float(t.tp.sum() / t.total)
    spec = _ratio(t.tn, t.tn + t.fp)
    f1 = _ratio(2 * t.tp, 2 * t.tp + t.fp + t.fn)
    return Metrics(acc, spec, f1, t)


def write_metrics_csv(path, m: Metrics):
    return write_csv(path, ("class", "accuracy", "specificity", "f1"), m.rows())


@dataclass
class CorruptionReport:
    """Error tables ``E[kind][severity-1]`` on corrupted and attacked-corrupted inputs."""

    clean_errors: dict[str, np.ndarray] = field(default_factory=dict)
    adv_errors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def kinds(self) -> list[str]:
        return list(self.clean_errors)

    def cce(self, kind: str) -> float:
        return float(np.mean(self.clean_errors[kind]))

    def ace(self, kind: str) -> float:
        return float(np.mean(self.adv_errors[kind]))

    @property
    def mean_cce(self) -> float:
        return float(np.mean([self.cce(k) for k in self.kinds]))

    @property
    def mean_ace(self) -> float:
        return float(np.mean([self.ace(k) for k in self.kinds]))

    def rows(self):
        out = []
        for k in self.kinds:
            for s in SEVERITIES:
                out.append([k, str(s), float(self.clean_errors[k][s - 1]), float(self.adv_errors[k][s - 1])])
            out.append([k, "mean", self.cce(k), self.ace(k)])
        out.append(["all", "mean", self.mean_cce, self.mean_ace])
        return out


def write_corruption_csv(path, report: CorruptionReport):
    return write_csv(path, ("kind", "severity", "clean_error", "adv_error"), report.rows())


def corruption_eval(model, images, labels, kinds=CORRUPTIONS, attack: AttackSpec | None = None,
                    seed: int = 0, batch_size: int = 100) -> CorruptionReport:
    attack = attack or AttackSpec()
    labels = np.asarray(labels)
    report = CorruptionReport()
    for kind in kinds:
        ce, ae = [], []
        for s in SEVERITIES:
            xc = corrupt(images, CorruptionSpec(kind, s), seed)
            clean, adv = adversarial_predictions(model, xc, labels, attack, seed=seed, batch_size=batch_size)
            ce.append(float(np.mean(clean != labels)))
            ae.append(float(np.mean(adv != labels)))
        report.clean_errors[kind] = np.asarray(ce)
        report.adv_errors[kind] = np.asarray(ae)
    return report


def saliency(model, x, target=None) -> np.ndarray:
    """Absolute input gradient of a class logit, min-max scaled per image.

    ``target`` is an int or per-sample array of classes; by default the
    predicted class. A flat gradient yields an all-zero map.
    """
    x = np.asarray(x)
    single = x.ndim == 2
    xb = x[None] if single else x
    xt = ad.Tensor(xb, requires_grad=True, dtype=getattr(model, "dtype", ad.default_dtype()))
    logits = model(xt)
    if target is None:
        cls = logits.data.argmax(axis=1)
    else:
        cls = np.broadcast_to(np.asarray(target, dtype=np.int64), (len(xb),))
    mask = np.zeros(logits.dims, dtype=logits.data.dtype)
    mask[np.arange(len(xb)), cls] = 1
    picked = ad.sum_(ad.mul(logits, ad.Tensor(mask)))
    if picked._node is None:
        g = np.zeros_like(xt.data)
    else:
        g = ad.grad(picked, [xt])[0]
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite saliency gradient")
    g = np.abs(g.astype(np.float64))
    lo = g.min(axis=(1, 2), keepdims=True)
    hi = g.max(axis=(1, 2), keepdims=True)
    span = hi - lo
    out = np.where(span > 0, (g - lo) / np.where(span > 0, span, 1.0), 0.0)
    return out[0] if single else out


def localization_hits(maps, lesion_masks, lung_masks) -> np.ndarray:
    """Per image: is mean saliency on the lesion above mean saliency outside the lungs?

    Images with an empty lesion mask or no pixels outside the lungs count as misses.
    """
    hits = []
    for s, les, lung in zip(maps, lesion_masks, lung_masks):
        outside = ~lung
        if not les.any() or not outside.any():
            hits.append(False)
            continue
        hits.append(bool(s[les].mean() > s[outside].mean()))
    return np.asarray(hits, dtype=bool)


def localization_fraction(model, images, labels, lesion_masks, lung_masks, batch_size: int = 100) -> float:
    pos = np.flatnonzero(np.asarray(labels) == 1)
    if len(pos) == 0:
        raise ValueError("no positive samples to score")
    hits = []
    for i in range(0, len(pos), batch_size):
        idx = pos[i:i + batch_size]
        hits.append(localization_hits(saliency(model, images[idx]), lesion_masks[idx], lung_masks[idx]))
    return float(np.concatenate(hits).mean())
