"""Ablation and sweep runners.

Each runner trains a grid of configurations over a list of seeds and returns a
:class:`Table` with one row per (cell, seed) plus ``mean`` and ``sd`` rows per
cell. Reference full-scale results ride along in the ``ref_acc`` and
``ref_logloss`` columns for side-by-side reading; nothing compares against them.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import ConfigError
from ..fusion import LossWeights
from ..synthdata import Dataset
from .config import RunConfig
from .report import write_csv
from .train import train

log = logging.getLogger(__name__)

# reference accuracies are percentages, reference loglosses are nats
ABLATION_ROWS = (
    # variant, use_sf, use_ceoa, ref_acc, ref_logloss
    ("backbone", False, False, 88.42, 0.439),
    ("sf", True, False, 90.34, 0.390),
    ("ceoa", False, True, 90.75, 0.357),
    ("full", True, True, 91.58, 0.259),
)
MODALITY_ROWS = (
    ("audio", 73.55, 0.871),
    ("visual", 88.86, 0.518),
    ("both", 94.10, 0.192),
)
K_GRID = (1, 5, 10, 15, 20, 25, 30)
K_REFERENCE = {
    "lkm": dict(zip(K_GRID, (89.32, 90.12, 90.83, 91.58, 91.38, 91.00, 90.91))),
    "rkm": dict(zip(K_GRID, (91.00, 91.11, 91.30, 91.27, 91.22, 91.08, 91.05))),
}

STAT_COLUMNS = ("seed", "stat", "status", "acc", "logloss", "ref_acc", "ref_logloss", "error")


@dataclass
class Cell:
    key: dict
    build: Callable[[], RunConfig]
    ref_acc: float | None = None
    ref_logloss: float | None = None


@dataclass
class Table:
    name: str
    key_columns: tuple[str, ...]
    rows: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def header(self) -> tuple[str, ...]:
        return (*self.key_columns, *STAT_COLUMNS)

    def summary(self) -> list[dict]:
        """One record per cell: its key, mean and sd rows merged, or the error."""
        out: dict[tuple, dict] = {}
        for row in self.rows:
            k = tuple(row[c] for c in self.key_columns)
            rec = out.setdefault(k, {**{c: row[c] for c in self.key_columns}, "status": row["status"]})
            if row["status"] != "ok":
                rec["error"] = row["error"]
            elif row["stat"] == "mean":
                rec.update(acc_mean=row["acc"], logloss_mean=row["logloss"])
            elif row["stat"] == "sd":
                rec.update(acc_sd=row["acc"], logloss_sd=row["logloss"])
        return list(out.values())

    def mean_acc(self, **key) -> float:
        for rec in self.summary():
            if all(rec[c] == v for c, v in key.items()) and "acc_mean" in rec:
                return rec["acc_mean"]
        raise KeyError(f"no finished cell matches {key}")

    def write(self, path) -> Path:
        return write_csv(path, self.header, self.rows, self.meta)


def _sd(values: Sequence[float]) -> float:
    return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


def _meta(name: str, cfg: RunConfig, seeds: Sequence[int]) -> dict:
    o = cfg.optim
    return {
        "table": name,
        "optimizer": "adamw",
        "lr": o.lr,
        "beta1": o.beta1,
        "beta2": o.beta2,
        "eps": o.eps,
        "weight_decay": o.weight_decay,
        "batch_size": cfg.batch_size,
        "epochs": cfg.epochs,
        "accuracy": cfg.accuracy,
        "seeds": " ".join(str(s) for s in seeds),
        "sd": "sample standard deviation over seeds (0 for a single seed)",
        "ref": "ref_acc / ref_logloss are reference full-scale results, for reading only",
    }


def run_grid(
    name: str,
    key_columns: Sequence[str],
    cells: Iterable[Cell],
    seeds: Sequence[int],
    base: RunConfig,
    dataset: Dataset | None = None,
    out_dir=None,
) -> Table:
    """Train every cell for every seed. A cell whose config is invalid gets a
    single ``config_error`` row and the grid moves on."""
    seeds = list(seeds)
    table = Table(name, tuple(key_columns), meta=_meta(name, base, seeds))
    for cell in cells:
        ref = {"ref_acc": cell.ref_acc, "ref_logloss": cell.ref_logloss}
        try:
            cfg0 = cell.build()
            cfg0.validate()
        except ConfigError as exc:
            log.warning("%s %s: %s", name, cell.key, exc)
            table.rows.append({**cell.key, **ref, "stat": "run", "status": "config_error", "error": str(exc)})
            continue
        accs, losses = [], []
        for seed in seeds:
            cfg = cfg0.copy()
            cfg.seed = seed
            run_dir = None
            if out_dir is not None:
                tag = "_".join(f"{k}-{v}" for k, v in cell.key.items())
                run_dir = Path(out_dir) / name / f"{tag}_seed-{seed}"
            metrics, _ = train(cfg, dataset=dataset, out_dir=run_dir)
            accs.append(metrics.acc)
            losses.append(metrics.logloss)
            table.rows.append(
                {**cell.key, **ref, "seed": seed, "stat": "run", "status": "ok", "acc": metrics.acc, "logloss": metrics.logloss}
            )
            log.info("%s %s seed %d: acc %.4f logloss %.4f", name, cell.key, seed, metrics.acc, metrics.logloss)
        for stat, fn in (("mean", lambda v: float(np.mean(v))), ("sd", _sd)):
            table.rows.append(
                {**cell.key, **ref, "stat": stat, "status": "ok", "acc": fn(accs), "logloss": fn(losses)}
            )
    if out_dir is not None:
        table.write(Path(out_dir) / f"{name}.csv")
    return table


def ablate(cfg: RunConfig, seeds: Sequence[int], dataset: Dataset | None = None, out_dir=None) -> Table:
    """Backbone, +SF, +CEOA and +both. Switching CEOA off zeroes its two loss weights."""

    def variant(use_sf, use_ceoa):
        def build():
            c = cfg.copy()
            c.use_sf, c.use_ceoa = use_sf, use_ceoa
            return c

        return build

    cells = [Cell({"variant": v}, variant(sf, ce), acc, ll) for v, sf, ce, acc, ll in ABLATION_ROWS]
    return run_grid("ablate", ("variant",), cells, seeds, cfg, dataset, out_dir)


def sweep_k(
    cfg: RunConfig,
    k_values: Sequence[int] = K_GRID,
    modes: Sequence[str] = ("lkm", "rkm"),
    seeds: Sequence[int] = (0,),
    dataset: Dataset | None = None,
    out_dir=None,
) -> Table:
    def cell(k, mode):
        def build():
            c = cfg.copy()
            c.ceoa.K, c.ceoa.mode = int(k), mode
            return c

        return Cell({"mode": mode, "K": int(k)}, build, K_REFERENCE.get(mode, {}).get(int(k)))

    cells = [cell(k, mode) for mode in modes for k in k_values]
    return run_grid("sweep_k", ("mode", "K"), cells, seeds, cfg, dataset, out_dir)


def default_lambda_combos() -> list[dict]:
    """The twelve shipped loss-weight combinations with their reference results."""
    raw = json.loads(resources.files("avsc.harness").joinpath("lambda_combos.json").read_text())
    return [dict(zip(raw["columns"], row)) for row in raw["rows"]]


def sweep_lambda(
    cfg: RunConfig,
    combos: Sequence | None = None,
    seeds: Sequence[int] = (0,),
    dataset: Dataset | None = None,
    out_dir=None,
) -> Table:
    """One cell per loss-weight 5-tuple. Negative weights raise before anything trains."""
    if combos is None:
        combos = default_lambda_combos()
    cells = []
    for i, combo in enumerate(combos, start=1):
        if isinstance(combo, dict):
            w = LossWeights.of([combo[f"l{j}"] for j in range(1, 6)])
            ref_acc, ref_ll = combo.get("ref_acc"), combo.get("ref_logloss")
        else:
            w = LossWeights.of(combo)
            ref_acc = ref_ll = None
        w.validate()

        def build(w=w):
            c = cfg.copy()
            c.loss_weights = LossWeights(*w.as_tuple())
            return c

        cells.append(Cell({"combo": i, **{f"l{j}": v for j, v in enumerate(w.as_tuple(), start=1)}}, build, ref_acc, ref_ll))
    return run_grid("sweep_lambda", ("combo", "l1", "l2", "l3", "l4", "l5"), cells, seeds, cfg, dataset, out_dir)


def ablate_modality(cfg: RunConfig, seeds: Sequence[int], dataset: Dataset | None = None, out_dir=None) -> Table:
    """Audio-only, visual-only and both. Single-modality rows use a linear scene head on that branch."""

    def build_for(m):
        def build():
            c = cfg.copy()
            c.modality = m
            return c

        return build

    cells = [Cell({"modality": m}, build_for(m), acc, ll) for m, acc, ll in MODALITY_ROWS]
    return run_grid("ablate_modality", ("modality",), cells, seeds, cfg, dataset, out_dir)
