"""``caplab`` command line: data generation, filtering, training, evaluation and checks.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Logs go to
standard error and data to files under ``--out``; each run also leaves a
``run.meta`` JSON with the resolved configuration and artifact hashes.
"""

from __future__ import annotations

import argparse
import contextlib
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
import traceback
from pathlib import Path

import numpy as np

from . import config as cfgmod
from ._csvio import write_csv
from .attacks import METHODS, AttackSpec, adversarial_predictions
from .data import CORRUPTIONS, PhantomSpec, generate_phantoms, pgm_read, pgm_write, read_dataset, write_dataset
from .evaluation import (corruption_eval, localization_hits, metrics, saliency, write_corruption_csv,
                         write_metrics_csv)
from .guided_filter import self_guided_filter
from .objectives import bound_check
from .trainer import load_checkpoint, save_checkpoint, train
from .vit import VitModel, weight_hash

log = logging.getLogger("caplab")

SUBCOMMANDS = ("gen-data", "filter", "train", "attack-eval", "corrupt-eval", "saliency", "ablate",
               "gradcheck", "bound-check")


class UsageError(Exception):
    def __init__(self, message, usage=""):
        super().__init__(message)
        self.usage = usage


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}", self.format_usage())


# ---------------------------------------------------------------------------
# run bookkeeping


class Run:
    """Output directory plus the artifacts written into it."""

    def __init__(self, args, cfg: cfgmod.RunConfig):
        self.args = args
        self.cfg = cfg
        self.out = Path(args.out or Path("caplab_runs") / args.command)
        self.out.mkdir(parents=True, exist_ok=True)
        self.artifacts: list[Path] = []

    def path(self, name) -> Path:
        p = self.out / name
        p.parent.mkdir(parents=True, exist_ok=True)
        self.artifacts.append(p)
        return p

    def write_meta(self, argv, extra=None):
        hashes = {}
        for p in sorted(set(self.artifacts)):
            if p.is_file():
                hashes[str(p.relative_to(self.out))] = hashlib.sha256(p.read_bytes()).hexdigest()
        meta = {
            "subcommand": self.args.command,
            "argv": list(argv),
            "resolution_order": ["default", "file", "flag"],
            "config_file": self.args.config,
            "config": self.cfg.to_dict(),
            "sources": {k: self.cfg.sources[k] for k in sorted(self.cfg.sources)},
            "seed": self.cfg["seed"],
            "artifacts": hashes,
            "created": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        }
        if extra:
            meta["result"] = extra
        (self.out / "run.meta").write_text(json.dumps(meta, indent=2, sort_keys=True, default=str) + "\n",
                                           encoding="utf-8")


def _load_model(path) -> VitModel:
    return load_checkpoint(path).model


def _dataset(path, limit=None):
    data, ids = read_dataset(path)
    if limit:
        data, ids = data.subset(np.arange(min(limit, len(data)))), ids[:limit]
    return data, ids


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(run: Run):
    c = run.cfg
    spec = PhantomSpec(image_size=c["data.image_size"], num_samples=c["data.num_samples"],
                       positive_fraction=c["data.positive_fraction"], seed=c["seed"])
    data = generate_phantoms(spec)
    manifest = write_dataset(run.out, data)
    run.artifacts.append(manifest)
    run.artifacts.extend(sorted((run.out / "images").glob("*.pgm")))
    run.artifacts.extend(sorted((run.out / "masks").glob("*.pgm")))
    log.info("wrote %d phantoms to %s", len(data), run.out)
    return {"num_samples": len(data), "positives": int(data.labels.sum())}


def cmd_filter(run: Run):
    src = Path(run.args.input)
    fcfg = run.cfg.filter_config()
    files = sorted(src.glob("*.pgm")) if src.is_dir() else [src]
    if not files:
        raise FileNotFoundError(f"no .pgm files under {src}")
    for f in files:
        out = run.path(f"{f.stem}_filtered.pgm")
        pgm_write(out, self_guided_filter(pgm_read(f), fcfg))
    log.info("filtered %d image(s)", len(files))
    return {"images": len(files)}


def _train_model(cfg: cfgmod.RunConfig, data, log_path=None, ckpt_dir=None, every=0):
    model = VitModel(cfg.vit_config(), seed=cfg["seed"])
    plan = cfg.train_plan()
    _, history = train(model, data.images, data.labels, plan, log_path=log_path,
                       checkpoint_dir=ckpt_dir, checkpoint_every=every)
    return model, history


def cmd_train(run: Run):
    data, _ = _dataset(run.args.data)
    model, history = _train_model(run.cfg, data, log_path=run.path("epoch_log.csv"),
                                  ckpt_dir=run.out / "checkpoints" if run.args.checkpoint_every else None,
                                  every=run.args.checkpoint_every)
    save_checkpoint(run.path("model.capt"), model, epoch=len(history))
    if run.args.checkpoint_every:
        run.artifacts.extend(sorted((run.out / "checkpoints").glob("*.capt")))
    return {"epochs": len(history), "weight_hash": weight_hash(model)}


def _attack_rows(model, data, cfg, methods, seed):
    rows = []
    clean_preds = None
    for method in methods:
        spec = AttackSpec(method=method, epsilon=cfg["attack.epsilon"], step_size=cfg["attack.step_size"],
                          steps=cfg["attack.steps"], momentum=cfg["attack.momentum"],
                          random_start=cfg["attack.random_start"])
        clean, adv = adversarial_predictions(model, data.images, data.labels, spec, seed=seed)
        clean_preds = clean
        rows.append([method, float(spec.epsilon), float(np.mean(clean == data.labels)),
                     float(np.mean(adv == data.labels))])
    return rows, clean_preds


def cmd_attack_eval(run: Run):
    model = _load_model(run.args.checkpoint)
    data, _ = _dataset(run.args.data, run.args.limit)
    methods = list(METHODS) if run.args.method == "all" else run.args.method.split(",")
    for m in methods:
        if m not in METHODS:
            raise cfgmod.ConfigError(f"unknown attack method {m!r}")
    rows, clean = _attack_rows(model, data, run.cfg, methods, run.cfg["seed"])
    write_csv(run.path("attack_eval.csv"), ("method", "eps", "clean_acc", "adv_acc"), rows)
    write_metrics_csv(run.path("metrics.csv"), metrics(clean, data.labels, model.config.num_classes))
    return {"rows": len(rows)}


def cmd_corrupt_eval(run: Run):
    model = _load_model(run.args.checkpoint)
    data, _ = _dataset(run.args.data, run.args.limit)
    kinds = CORRUPTIONS if run.args.kinds == "all" else tuple(run.args.kinds.split(","))
    report = corruption_eval(model, data.images, data.labels, kinds, run.cfg.eval_attack(),
                             seed=run.cfg["seed"])
    write_corruption_csv(run.path("corruption.csv"), report)
    return {"mean_cce": report.mean_cce, "mean_ace": report.mean_ace}


def cmd_saliency(run: Run):
    model = _load_model(run.args.checkpoint)
    data, ids = _dataset(run.args.data, run.args.limit)
    maps = saliency(model, data.images, run.args.target)
    rows = []
    hits = localization_hits(maps, data.lesion_masks, data.lung_masks)
    for i, sid in enumerate(ids):
        pgm_write(run.path(f"{sid}_saliency.pgm"), maps[i])
        rows.append([sid, int(data.labels[i]), int(hits[i]) if data.labels[i] == 1 else "NA"])
    write_csv(run.path("localization.csv"), ("id", "label", "lesion_above_outside"), rows)
    pos = data.labels == 1
    frac = float(hits[pos].mean()) if pos.any() else float("nan")
    return {"localization_fraction": frac}


METRIC_GRID = [("se", "kl"), ("se", "se"), ("kl", "kl"), ("kl", "se")]
# label, filter on, apr on, hybrid metric on
COMPONENT_GRID = [("-", False, False, False), ("SGF", True, False, False),
                  ("SGF+APR", True, True, False), ("SGF+APR+HDM", True, True, True)]


def ablation_cells(grid: str):
    cells = []
    if grid in ("metric", "both"):
        for outer, inner in METRIC_GRID:
            cells.append(("metric", f"{outer}/{inner}",
                          {"mode": "cap", "objective.outer": outer, "objective.inner": inner}))
    if grid in ("component", "both"):
        for label, sgf, apr, hdm in COMPONENT_GRID:
            cells.append(("component", label, {
                "mode": "cap",
                "filter.enabled": str(sgf),
                "apr.lambda_soft": "8/255" if sgf else "0",
                "apr.gamma": "0.0001" if apr else "0",
                "objective.outer": "se" if hdm else "kl",
                "objective.inner": "kl",
            }))
    return cells


def cmd_ablate(run: Run):
    train_data, _ = _dataset(run.args.data)
    test_data, _ = _dataset(run.args.test_data or run.args.data, run.args.limit)
    rows = []
    for grid, label, overrides in ablation_cells(run.args.grid):
        cell_cfg = run.cfg.with_overrides(overrides, source="grid")
        v = cell_cfg.values
        row = [grid, label, v["objective.outer"], v["objective.inner"], str(v["filter.enabled"]).lower(),
               str(v["apr.gamma"] > 0).lower()]
        try:
            model, _ = _train_model(cell_cfg, train_data)
            clean, adv = adversarial_predictions(model, test_data.images, test_data.labels,
                                                 cell_cfg.eval_attack(), seed=cell_cfg["seed"])
            rows.append(row + ["ok", float(np.mean(clean == test_data.labels)),
                               float(np.mean(adv == test_data.labels))])
        except Exception as exc:  # a failed cell is recorded and the grid goes on
            log.error("cell %s/%s failed: %s", grid, label, exc)
            rows.append(row + ["failed", float("nan"), float("nan")])
        log.info("cell %s", rows[-1])
    write_csv(run.path("ablation.csv"),
              ("grid", "cell", "outer", "inner", "sgf", "apr", "status", "clean_acc", "pgd_acc"), rows)
    return {"cells": len(rows), "failed": sum(r[6] == "failed" for r in rows)}


def cmd_gradcheck(run: Run):
    from .gradcheck import run_gradchecks

    dtypes = {"both": (np.float64, np.float32), "float64": (np.float64,), "float32": (np.float32,)}
    results = run_gradchecks(dtypes[run.args.dtype], seed=run.cfg["seed"])
    write_csv(run.path("gradcheck.csv"), ("case", "dtype", "max_rel_error", "tol", "passed"),
              [[r.name, r.dtype, r.max_rel_error, r.tol, str(r.passed).lower()] for r in results])
    failed = [f"{r.name}[{r.dtype}]" for r in results if not r.passed]
    if failed:
        raise RuntimeError(f"gradient check failed for {', '.join(failed)}")
    return {"cases": len(results)}


def cmd_bound_check(run: Run):
    rep = bound_check(n_samples=run.args.samples, beta=run.cfg["objective.beta"], seed=run.cfg["seed"])
    write_csv(run.path("bound_check.csv"),
              ("beta", "samples", "violations", "min_loss", "max_loss", "bound", "worst_case",
               "decomposition_rel_error"),
              [[float(rep.beta), rep.n_samples, rep.violations, rep.min_value, rep.max_value, rep.upper_bound,
                rep.worst_case_value, rep.decomposition_max_rel_error]])
    if not rep.passed:
        raise RuntimeError(f"bound violated: {rep.counterexample}")
    return {"violations": rep.violations}


COMMANDS = {
    "gen-data": cmd_gen_data, "filter": cmd_filter, "train": cmd_train, "attack-eval": cmd_attack_eval,
    "corrupt-eval": cmd_corrupt_eval, "saliency": cmd_saliency, "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck, "bound-check": cmd_bound_check,
}

# flag dest -> config key
FLAG_KEYS = {
    "seed": "seed", "mode": "mode", "epochs": "epochs", "lr": "lr", "batch_size": "batch_size",
    "beta": "objective.beta", "outer": "objective.outer", "inner": "objective.inner",
    "gamma": "apr.gamma", "lambda_soft": "apr.lambda_soft", "window": "filter.window", "t": "filter.t",
    "eps": "attack.epsilon", "step": "attack.step_size", "iters": "attack.steps",
    "num": "data.num_samples", "positive_fraction": "data.positive_fraction",
    "image_size": "data.image_size",
}


def build_parser() -> _Parser:
    p = _Parser(prog="caplab", description="Contour-prior adversarial training toolkit.")
    sub = p.add_subparsers(dest="command", metavar="SUBCOMMAND", parser_class=_Parser)

    def add(name, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", help="flat key = value config file")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config key (repeatable)")
        s.add_argument("--out", help="output directory")
        s.add_argument("--seed", type=int)
        return s

    s = add("gen-data", "write a synthetic phantom dataset")
    s.add_argument("--num", type=int)
    s.add_argument("--positive-fraction", type=float)
    s.add_argument("--image-size", type=int)

    s = add("filter", "apply the self-guided filter to PGM images")
    s.add_argument("--input", required=True, help="a .pgm file or a directory of them")
    s.add_argument("--window", type=int)
    s.add_argument("--t", type=float)

    s = add("train", "train a model on a dataset directory")
    s.add_argument("--data", required=True)
    s.add_argument("--mode", choices=("vanilla", "trades", "cap"))
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--beta", type=float)
    s.add_argument("--outer", choices=("se", "kl"))
    s.add_argument("--inner", choices=("se", "kl"))
    s.add_argument("--gamma", type=float)
    s.add_argument("--lambda-soft", type=float)
    s.add_argument("--checkpoint-every", type=int, default=0)

    def eval_flags(s):
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--data", required=True)
        s.add_argument("--limit", type=int, help="use only the first N samples")

    def attack_flags(s):
        s.add_argument("--eps", type=str)
        s.add_argument("--step", type=str)
        s.add_argument("--iters", type=int)

    s = add("attack-eval", "clean and adversarial accuracy of a checkpoint")
    eval_flags(s)
    attack_flags(s)
    s.add_argument("--method", default="pgd", help=f"one of {', '.join(METHODS)}, a comma list, or 'all'")

    s = add("corrupt-eval", "corruption errors CCE and ACE of a checkpoint")
    eval_flags(s)
    attack_flags(s)
    s.add_argument("--kinds", default="all", help="comma list of corruption kinds or 'all'")

    s = add("saliency", "export input-gradient saliency maps")
    eval_flags(s)
    s.add_argument("--target", type=int, help="class whose logit is explained (default: predicted)")

    s = add("ablate", "metric and component ablation grids")
    s.add_argument("--data", required=True)
    s.add_argument("--test-data")
    s.add_argument("--limit", type=int)
    s.add_argument("--grid", choices=("metric", "component", "both"), default="metric")
    s.add_argument("--epochs", type=int)

    s = add("gradcheck", "finite-difference checks of every primitive and loss")
    s.add_argument("--dtype", choices=("both", "float64", "float32"), default="both")

    s = add("bound-check", "random sweep of the outer-loss bound")
    s.add_argument("--beta", type=float)
    s.add_argument("--samples", type=int, default=100_000)
    return p


def _overrides(args) -> dict[str, str]:
    out = cfgmod.parse_assignments(args.set)
    for dest, key in FLAG_KEYS.items():
        val = getattr(args, dest, None)
        if val is not None:
            out[key] = str(val)
    return out


@contextlib.contextmanager
def _thread_cap():
    raw = os.environ.get("CAP_THREADS")
    if not raw:
        yield
        return
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"CAP_THREADS must be a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        if not argv:
            raise UsageError("caplab: error: a subcommand is required", parser.format_usage())
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("caplab: error: a subcommand is required", parser.format_usage())
        cfg = cfgmod.resolve(args.config, _overrides(args))
    except UsageError as exc:
        sys.stderr.write(exc.usage + str(exc) + "\n")
        return 1
    except (cfgmod.ConfigError, FileNotFoundError) as exc:
        sys.stderr.write(parser.format_usage() + f"caplab: error: {exc}\n")
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)

    try:
        with _thread_cap():
            r = Run(args, cfg)
            result = COMMANDS[args.command](r)
            r.write_meta(argv, result)
    except UsageError as exc:
        sys.stderr.write(str(exc) + "\n")
        return 1
    except cfgmod.ConfigError as exc:
        sys.stderr.write(f"caplab {args.command}: configuration error: {exc}\n")
        return 1
    except Exception as exc:
        log.debug("%s", traceback.format_exc())
        sys.stderr.write(f"caplab {args.command}: {type(exc).__name__}: {exc}\n")
        return 2
    log.info("%s finished; outputs in %s", args.command, r.out)
    return 0


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    return run(argv)


if __name__ == "__main__":
    sys.exit(main())
