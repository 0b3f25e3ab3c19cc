"""Command-line interface: ``avsc <subcommand> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import ConfigError
from .harness.checkpoint import Checkpoint
from .harness.config import FULL_SCALE_BATCH, FULL_SCALE_EPOCHS, FULL_SCALE_LR, RunConfig, preset
from .harness.gradcheck import composite_grad_check
from .harness.projection import export_projection
from .harness.report import write_csv
from .harness.runners import K_GRID, ablate, ablate_modality, sweep_k, sweep_lambda
from .harness.train import build_dataset, evaluate, train
from .synthdata import save_dataset

log = logging.getLogger("avsc")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON run config; unknown keys are errors")
    p.add_argument("--preset", choices=("desk", "paper"), help="hyperparameter preset (default desk)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--epochs", type=int, help="override the number of epochs")
    p.add_argument("-v", "--verbose", action="store_true")


def _seeds(p: argparse.ArgumentParser, default: int) -> None:
    p.add_argument("--seeds", type=int, default=default, help=f"number of seeds, counting up from --seed (default {default})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="avsc", description="Audio-visual scene classification on synthetic data")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model")
    _common(p)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")

    for name, help_ in (
        ("ablate", "backbone / +SF / +CEOA / +both"),
        ("ablate-modality", "audio-only / visual-only / both"),
    ):
        p = sub.add_parser(name, help=help_)
        _common(p)
        _seeds(p, 3)

    p = sub.add_parser("sweep-k", help="K x {lkm, rkm} grid")
    _common(p)
    _seeds(p, 1)
    p.add_argument("--k", type=int, nargs="+", default=list(K_GRID))
    p.add_argument("--modes", nargs="+", choices=("lkm", "rkm"), default=["lkm", "rkm"])

    p = sub.add_parser("sweep-lambda", help="loss-weight combinations")
    _common(p)
    _seeds(p, 1)
    p.add_argument("--combos", type=Path, help="JSON list of 5-element weight lists (default: the shipped twelve)")

    p = sub.add_parser("gradcheck", help="finite-difference check of the full objective")
    _common(p)
    _seeds(p, 10)
    p.add_argument("--max-entries", type=int, default=6)

    p = sub.add_parser("gen-data", help="write the synthetic dataset to a file")
    _common(p)

    p = sub.add_parser("project-weights", help="2-D PCA of the classifier weight rows")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    return parser


def load_config(args) -> RunConfig:
    if args.config is not None:
        cfg = RunConfig.load(args.config)
        if args.preset == "paper":
            cfg.optim.lr, cfg.epochs, cfg.batch_size = FULL_SCALE_LR, FULL_SCALE_EPOCHS, FULL_SCALE_BATCH
    else:
        cfg = preset(args.preset or "desk")
    if args.seed is not None:
        cfg.seed = args.seed
    if args.epochs is not None:
        cfg.epochs = args.epochs
    if args.out is not None:
        cfg.out_dir = str(args.out)
    cfg.validate()
    return cfg


def _seed_list(cfg: RunConfig, n: int) -> list[int]:
    return list(range(cfg.seed, cfg.seed + n))


def _print_table(table) -> None:
    for rec in table.summary():
        key = " ".join(f"{c}={rec[c]}" for c in table.key_columns)
        if rec["status"] != "ok":
            print(f"{key}  {rec['status']}: {rec.get('error', '')}")
        else:
            print(f"{key}  acc {rec['acc_mean']:.4f} +- {rec['acc_sd']:.4f}  logloss {rec['logloss_mean']:.4f}")


def cmd_train(args) -> int:
    cfg = load_config(args)
    out = Path(cfg.out_dir)
    metrics, _ = train(cfg, out_dir=out)
    print(f"test acc {metrics.acc:.4f} logloss {metrics.logloss:.4f}  ({out})")
    return 0


def cmd_evaluate(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    m = evaluate(ckpt, args.split)
    print(f"{args.split} acc {m.acc:.17g} logloss {m.logloss:.17g}")
    if args.out is not None:
        write_csv(args.out / f"evaluate_{args.split}.csv", ("split", "acc", "logloss"),
                  [{"split": args.split, "acc": m.acc, "logloss": m.logloss}])
    return 0


def cmd_grid(args) -> int:
    cfg = load_config(args)
    seeds = _seed_list(cfg, args.seeds)
    out = Path(cfg.out_dir)
    if args.command == "ablate":
        table = ablate(cfg, seeds, out_dir=out)
    elif args.command == "ablate-modality":
        table = ablate_modality(cfg, seeds, out_dir=out)
    elif args.command == "sweep-k":
        table = sweep_k(cfg, args.k, args.modes, seeds, out_dir=out)
    else:
        combos = json.loads(args.combos.read_text()) if args.combos else None
        table = sweep_lambda(cfg, combos, seeds, out_dir=out)
    _print_table(table)
    return 0


def cmd_gradcheck(args) -> int:
    base = args.seed or 0
    ok = True
    for seed in range(base, base + args.seeds):
        mode = "lkm" if seed % 2 == 0 else "rkm"
        report = composite_grad_check(seed, mode, max_entries=args.max_entries)
        ok &= report.passed
        print(f"seed {seed} ({mode}): {'PASS' if report.passed else 'FAIL'} max rel err {report.max_error:.3e}")
        if args.verbose or not report.passed:
            print(report)
    return 0 if ok else 1


def cmd_gen_data(args) -> int:
    cfg = load_config(args)
    out = Path(cfg.out_dir)
    path = save_dataset(build_dataset(cfg.data), out / "dataset.npz" if out.suffix != ".npz" else out)
    print(path)
    return 0


def cmd_project(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    out = args.out if args.out is not None else args.checkpoint.parent
    proj = export_projection(ckpt, out / "projection.csv")
    print(f"{len(proj.labels)} rows, eigenvalues {proj.eigenvalues}  ({out / 'projection.csv'})")
    return 0


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_grid,
    "ablate-modality": cmd_grid,
    "sweep-k": cmd_grid,
    "sweep-lambda": cmd_grid,
    "gradcheck": cmd_gradcheck,
    "gen-data": cmd_gen_data,
    "project-weights": cmd_project,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
