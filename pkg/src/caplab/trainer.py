"""Vanilla, TRADES and CAP training loops, epoch logs and checkpoints."""

from __future__ import annotations

import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from ._csvio import write_csv
from .apr import AprConfig, attention_noise_step, inject, restore, soft_label
from .attacks import AttackSpec, inner_max
from .guided_filter import FilterConfig, self_guided_filter
from .objectives import MetricCombo, cap_outer_loss, ce_loss, kl_loss, one_hot
from .optim import AdamW, clip_grad_norm, cosine_lr, step_lr
from .vit import VitConfig, VitModel

log = logging.getLogger(__name__)

MODES = ("vanilla", "trades", "cap")
CHECKPOINT_MAGIC = b"CAPT"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


def default_train_attack() -> AttackSpec:
    return AttackSpec(method="pgd", steps=5, random_start=False)


@dataclass(frozen=True)
class TrainPlan:
    mode: str = "cap"
    epochs: int = 30
    batch_size: int = 64
    lr: float = 5e-4
    schedule: str = "cosine"
    lr_step_every: int = 20
    lr_step_factor: float = 0.1
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.05
    grad_clip: float = 1.0
    beta: float = 6.0
    combo: MetricCombo = field(default_factory=MetricCombo)
    adv_target: str = "clean"
    attack: AttackSpec = field(default_factory=default_train_attack)
    inner_start_scale: float = 0.25
    apr: AprConfig = field(default_factory=AprConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    use_filter: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.schedule not in ("cosine", "step"):
            raise ValueError("schedule must be 'cosine' or 'step'")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def trades(cls, **kw) -> "TrainPlan":
        return cls(mode="trades", combo=MetricCombo("kl", "kl"), **kw)

    def cap_as_trades(self) -> "TrainPlan":
        """CAP with every CAP-specific knob zeroed; steps match TRADES."""
        return replace(
            self, mode="cap", combo=MetricCombo("kl", "kl"), use_filter=False,
            apr=replace(self.apr, gamma=0.0, lambda_soft=0.0),
        )


@dataclass
class StepMetrics:
    loss: float
    clean_acc: float
    adv_acc: float
    lr: float
    grad_norm: float
    eta: float = 0.0
    noise_norms: list[float] = field(default_factory=list)
    alpha_norms: list[float] = field(default_factory=list)
    components: dict = field(default_factory=dict)
    grads: list[np.ndarray] | None = None


def _probs(model, x, grad=True):
    if grad:
        return ad.softmax(model(x))
    with ad.no_grad():
        return ad.softmax(model(x))


def _acc(p, y) -> float:
    return float((p.data.argmax(axis=1) == y).mean())


def _finish(model, opt, loss, parts, plan, lr, batch_index, record):
    value = loss.item()
    if not math.isfinite(value):
        diag = {"batch_index": batch_index, **{k: float(v) for k, v in parts.items()}}
        raise TrainingError(f"non-finite loss at batch {batch_index}: {diag}", diag)
    grads = ad.grad(loss, model.parameters())
    norm = clip_grad_norm(grads, plan.grad_clip)
    saved = [g.copy() for g in grads] if record else None
    return value, norm, grads, saved


def train_step_vanilla(model, opt, x, y, plan: TrainPlan, lr: float, rng=None,
                       batch_index: int = 0, record: bool = False) -> StepMetrics:
    p = _probs(model, x)
    loss = ce_loss(p, one_hot(y, p.dims[1], p.data.dtype))
    value, norm, grads, saved = _finish(model, opt, loss, {"ce": loss.item()}, plan, lr, batch_index, record)
    opt.step(grads, lr)
    return StepMetrics(value, _acc(p, y), float("nan"), lr, norm, grads=saved)


def train_step_trades(model, opt, x, y, plan: TrainPlan, lr: float, rng,
                      batch_index: int = 0, record: bool = False) -> StepMetrics:
    """``CE(f(x), y) + beta * KL(f(x) || f(x_adv))`` with a KL inner maximisation."""
    p_clean = _probs(model, x)
    x_adv = inner_max(model, x, plan.attack, metric="kl", start_scale=plan.inner_start_scale,
                      rng=rng, p_clean=p_clean.data)
    p_adv = _probs(model, x_adv)
    natural = ce_loss(p_clean, one_hot(y, p_clean.dims[1], p_clean.data.dtype))
    robust = kl_loss(p_clean, p_adv)
    loss = ad.add(natural, ad.scale(robust, plan.beta))
    parts = {"natural": natural.item(), "robust": robust.item()}
    value, norm, grads, saved = _finish(model, opt, loss, parts, plan, lr, batch_index, record)
    opt.step(grads, lr)
    return StepMetrics(value, _acc(p_clean, y), _acc(p_adv, y), lr, norm, components=parts, grads=saved)


def train_step_cap(model, opt, x, y, plan: TrainPlan, lr: float, rng,
                   batch_index: int = 0, record: bool = False) -> StepMetrics:
    """One CAP update.

    filter -> surrogate noise -> inject -> inner max at theta+xi -> soft label
    -> outer loss gradient at theta+xi -> restore -> optimiser step.
    """
    apr = plan.apr
    dtype = model.dtype
    x = np.asarray(x, dtype=dtype)
    x_tilde = self_guided_filter(x, plan.filter).astype(dtype) if plan.use_filter else x
    eta = lr if apr.use_lr_as_eta else 1.0
    beta_sur = plan.beta if apr.beta_sur is None else apr.beta_sur

    noise = None
    p_tilde = None
    if apr.enabled:
        noise, p_tilde = attention_noise_step(model, x, x_tilde, y, beta_sur, eta, apr.gamma,
                                              apr.normalization)
    if apr.lambda_soft > 0:
        if p_tilde is None:
            p_tilde = _probs(model, x_tilde, grad=False).data
        y_soft = soft_label(p_tilde, y, apr.lambda_soft)
    else:
        y_soft = None

    if noise is not None:
        inject(model, noise)
    try:
        p_clean = _probs(model, x)
        if y_soft is None:
            y_soft = one_hot(y, p_clean.dims[1], dtype)
        x_adv = inner_max(model, x, plan.attack, metric=plan.combo.inner,
                          start_scale=plan.inner_start_scale, rng=rng, p_clean=p_clean.data)
        p_adv = _probs(model, x_adv)
        loss = cap_outer_loss(p_clean, p_adv, y_soft, plan.beta, plan.combo, plan.adv_target)
        parts = {"loss": loss.item()}
        value, norm, grads, saved = _finish(model, opt, loss, parts, plan, lr, batch_index, record)
    finally:
        if noise is not None:
            restore(model, noise)
    opt.step(grads, lr)
    return StepMetrics(
        value, _acc(p_clean, y), _acc(p_adv, y), lr, norm, eta=eta,
        noise_norms=noise.noise_norms if noise else [],
        alpha_norms=list(noise.alpha_norms) if noise else [],
        grads=saved,
    )


STEPS = {"vanilla": train_step_vanilla, "trades": train_step_trades, "cap": train_step_cap}


def no_decay_indices(model: VitModel) -> list[int]:
    """Layer-norm parameters and the class token are exempt from weight decay."""
    return [i for i, (name, _) in enumerate(model.named_parameters())
            if ".norm" in name or name.startswith("norm.") or name == "cls_token"]


class Trainer:
    """Owns the optimiser, the RNG and the step counter for one model."""

    def __init__(self, model: VitModel, plan: TrainPlan, steps_per_epoch: int = 1):
        self.model = model
        self.plan = plan
        self.steps_per_epoch = max(1, steps_per_epoch)
        self.total_steps = max(1, plan.epochs * self.steps_per_epoch)
        self.opt = AdamW(model.parameters(), lr=plan.lr, betas=plan.betas,
                         weight_decay=plan.weight_decay, no_decay=no_decay_indices(model))
        self.rng = np.random.default_rng(plan.seed)
        self.global_step = 0
        self.epoch = 0

    def lr_at(self, step: int) -> float:
        if self.plan.schedule == "cosine":
            return cosine_lr(min(step, self.total_steps), self.total_steps, self.plan.lr)
        return step_lr(step // self.steps_per_epoch, self.plan.lr, self.plan.lr_step_every,
                       self.plan.lr_step_factor)

    def step(self, x, y, record: bool = False) -> StepMetrics:
        lr = self.lr_at(self.global_step)
        x = np.asarray(x, dtype=self.model.dtype)
        y = np.asarray(y, dtype=np.int64)
        m = STEPS[self.plan.mode](self.model, self.opt, x, y, self.plan, lr, self.rng,
                                  batch_index=self.global_step, record=record)
        self.global_step += 1
        return m


LOG_FIELDS = ("epoch", "lr", "train_loss", "clean_acc", "adv_acc")


def train(model: VitModel, images, labels, plan: TrainPlan, log_path=None, checkpoint_dir=None,
          checkpoint_every: int = 0, on_step=None) -> tuple[VitModel, list[dict]]:
    """Train in place; returns the model and one log row per epoch."""
    images = np.asarray(images, dtype=model.dtype)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(images)
    if n == 0:
        raise ValueError("empty training set")
    steps_per_epoch = math.ceil(n / plan.batch_size)
    trainer = Trainer(model, plan, steps_per_epoch)
    history: list[dict] = []
    for epoch in range(plan.epochs):
        order = trainer.rng.permutation(n)
        tot_loss = tot_clean = tot_adv = 0.0
        lr0 = trainer.lr_at(trainer.global_step)
        for start in range(0, n, plan.batch_size):
            idx = order[start:start + plan.batch_size]
            m = trainer.step(images[idx], labels[idx])
            if on_step is not None:
                on_step(trainer, m)
            k = len(idx)
            tot_loss += m.loss * k
            tot_clean += m.clean_acc * k
            tot_adv += m.adv_acc * k
        trainer.epoch = epoch + 1
        row = {"epoch": epoch + 1, "lr": lr0, "train_loss": tot_loss / n,
               "clean_acc": tot_clean / n, "adv_acc": tot_adv / n}
        history.append(row)
        log.info("epoch %d loss %.4f clean %.3f adv %.3f", epoch + 1, row["train_loss"],
                 row["clean_acc"], row["adv_acc"])
        if checkpoint_dir and checkpoint_every and (epoch + 1) % checkpoint_every == 0:
            Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
            save_checkpoint(Path(checkpoint_dir) / f"epoch{epoch + 1:03d}.capt", model,
                            trainer.opt, trainer.rng, epoch + 1)
    if log_path is not None:
        write_epoch_log(log_path, history)
    model.history_ = history
    return model, history


def write_epoch_log(path, history):
    write_csv(path, LOG_FIELDS,
              [[r["epoch"]] + [float(r[k]) for k in LOG_FIELDS[1:]] for r in history])


# ---------------------------------------------------------------------------
# checkpoints: b"CAPT" | u32 version | u32 meta_len | meta json | tensor records


@dataclass
class Checkpoint:
    model: VitModel
    epoch: int
    rng_state: dict | None
    optimizer_state: dict | None
    meta: dict


def _encode_meta(meta: dict) -> bytes:
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(path, model: VitModel, optimizer: AdamW | None = None, rng=None, epoch: int = 0,
                    extra: dict | None = None):
    names = [n for n, _ in model.named_parameters()]
    meta = {
        "vit_config": model.config.to_dict(),
        "epoch": int(epoch),
        "rng_state": rng.bit_generator.state if rng is not None else None,
        "optimizer_step": optimizer.t if optimizer is not None else None,
        "extra": extra or {},
    }
    records = [(f"model.{n}", p.data) for n, p in model.named_parameters()]
    if optimizer is not None:
        records += [(f"optim.m.{n}", m) for n, m in zip(names, optimizer.m)]
        records += [(f"optim.v.{n}", v) for n, v in zip(names, optimizer.v)]
    buf = io.BytesIO()
    raw = _encode_meta(meta)
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    ad.write_tensors(buf, records)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint (magic {magic!r})")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (n,) = struct.unpack("<I", fh.read(4))
        meta = json.loads(fh.read(n).decode("utf-8"))
        tensors = ad.read_tensors(fh)
    model = VitModel(VitConfig(**meta["vit_config"]), dtype=np.float32)
    model.load_state_dict({k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")})
    opt_state = None
    if meta.get("optimizer_step") is not None:
        names = [n for n, _ in model.named_parameters()]
        opt_state = {"t": meta["optimizer_step"]}
        for i, name in enumerate(names):
            opt_state[f"m.{i}"] = tensors[f"optim.m.{name}"]
            opt_state[f"v.{i}"] = tensors[f"optim.v.{name}"]
    return Checkpoint(model, meta["epoch"], meta.get("rng_state"), opt_state, meta)
