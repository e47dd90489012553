"""Flat ``key = value`` run configuration with dotted namespaces.

Resolution order, lowest to highest: built-in defaults, config file, command
line flags.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

from .apr import AprConfig
from .attacks import AttackSpec
from .guided_filter import FilterConfig
from .objectives import MetricCombo
from .trainer import TrainPlan
from .vit import VitConfig


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _float(s: str) -> float:
    # "8/255" is accepted so budgets can be written the usual way
    return float(Fraction(s.strip())) if "/" in s else float(s)


def _opt_float(s: str):
    return None if s.strip().lower() in ("", "none") else _float(s)


def _str(s: str) -> str:
    return s.strip()


# key -> (parser, default text)
SCHEMA: dict[str, tuple] = {
    "mode": (_str, "cap"),
    "epochs": (int, "30"),
    "batch_size": (int, "64"),
    "lr": (_float, "0.0005"),
    "schedule": (_str, "cosine"),
    "weight_decay": (_float, "0.05"),
    "grad_clip": (_float, "1.0"),
    "seed": (int, "0"),
    "objective.outer": (_str, "se"),
    "objective.inner": (_str, "kl"),
    "objective.beta": (_float, "6.0"),
    "objective.adv_target": (_str, "clean"),
    "apr.enabled": (_bool, "true"),
    "apr.gamma": (_float, "0.0001"),
    "apr.beta_sur": (_opt_float, "none"),
    "apr.lambda_soft": (_float, "8/255"),
    "apr.use_lr_as_eta": (_bool, "true"),
    "apr.normalization": (_str, "layer"),
    "filter.enabled": (_bool, "true"),
    "filter.window": (int, "5"),
    "filter.t": (_float, "0.003"),
    "train_attack.steps": (int, "5"),
    "train_attack.start_scale": (_float, "0.25"),
    "attack.method": (_str, "pgd"),
    "attack.epsilon": (_float, "8/255"),
    "attack.step_size": (_float, "2/255"),
    "attack.steps": (int, "10"),
    "attack.momentum": (_float, "1.0"),
    "attack.random_start": (_bool, "true"),
    "model.image_size": (int, "32"),
    "model.patch_size": (int, "4"),
    "model.embed_dim": (int, "64"),
    "model.num_heads": (int, "4"),
    "model.depth": (int, "4"),
    "model.mlp_ratio": (int, "2"),
    "model.num_classes": (int, "2"),
    "data.num_samples": (int, "1000"),
    "data.positive_fraction": (_float, "0.5"),
    "data.image_size": (int, "32"),
}


def parse_config_text(text: str, origin: str = "<config>") -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; later duplicates win."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{origin}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def load_config_file(path) -> dict[str, str]:
    path = Path(path)
    return parse_config_text(path.read_text(encoding="utf-8"), str(path))


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)
    sources: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def with_overrides(self, overrides: dict[str, str], source: str = "flag") -> "RunConfig":
        vals, srcs = dict(self.values), dict(self.sources)
        for k, v in overrides.items():
            vals[k] = _convert(k, v)
            srcs[k] = source
        return RunConfig(vals, srcs)

    def to_dict(self) -> dict:
        return {k: self.values[k] for k in sorted(self.values)}

    def train_plan(self) -> TrainPlan:
        v = self.values
        return TrainPlan(
            mode=v["mode"], epochs=v["epochs"], batch_size=v["batch_size"], lr=v["lr"],
            schedule=v["schedule"], weight_decay=v["weight_decay"], grad_clip=v["grad_clip"],
            beta=v["objective.beta"], combo=MetricCombo(v["objective.outer"], v["objective.inner"]),
            adv_target=v["objective.adv_target"],
            attack=AttackSpec(method="pgd", epsilon=v["attack.epsilon"], step_size=v["attack.step_size"],
                              steps=v["train_attack.steps"], random_start=False),
            inner_start_scale=v["train_attack.start_scale"],
            apr=AprConfig(enabled=v["apr.enabled"], gamma=v["apr.gamma"], beta_sur=v["apr.beta_sur"],
                          lambda_soft=v["apr.lambda_soft"], use_lr_as_eta=v["apr.use_lr_as_eta"],
                          normalization=v["apr.normalization"]),
            filter=FilterConfig(v["filter.window"], v["filter.t"]),
            use_filter=v["filter.enabled"], seed=v["seed"],
        )

    def vit_config(self) -> VitConfig:
        v = self.values
        return VitConfig(image_size=v["model.image_size"], patch_size=v["model.patch_size"],
                         embed_dim=v["model.embed_dim"], num_heads=v["model.num_heads"],
                         depth=v["model.depth"], mlp_ratio=v["model.mlp_ratio"],
                         num_classes=v["model.num_classes"])

    def eval_attack(self) -> AttackSpec:
        v = self.values
        return AttackSpec(method=v["attack.method"], epsilon=v["attack.epsilon"],
                          step_size=v["attack.step_size"], steps=v["attack.steps"],
                          momentum=v["attack.momentum"], random_start=v["attack.random_start"])

    def filter_config(self) -> FilterConfig:
        return FilterConfig(self.values["filter.window"], self.values["filter.t"])


def _convert(key: str, text: str):
    if key not in SCHEMA:
        raise ConfigError(f"unknown key {key!r}")
    parser = SCHEMA[key][0]
    try:
        return parser(str(text))
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from None


def defaults() -> RunConfig:
    return RunConfig({k: _convert(k, d) for k, (_, d) in SCHEMA.items()},
                     {k: "default" for k in SCHEMA})


def resolve(config_path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    cfg = defaults()
    if config_path is not None:
        cfg = cfg.with_overrides(load_config_file(config_path), source="file")
    return cfg.with_overrides(overrides or {}, source="flag")


def parse_assignments(items) -> dict[str, str]:
    """``["a.b=1", ...]`` from repeated ``--set`` flags."""
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out

