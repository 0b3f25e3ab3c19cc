"""Training loop and checkpoint evaluation."""

from __future__ import annotations

import functools
import json
import logging
import math
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .. import numcore as nc
from ..errors import ConfigError
from ..model import AVSCModel
from ..numcore import Tensor
from ..synthdata import Dataset, generate_dataset, make_scene_spec
from .checkpoint import Checkpoint
from .config import DataConfig, RunConfig
from .metrics import Metrics, scene_metrics
from .optim import AdamW
from .report import write_csv

log = logging.getLogger(__name__)

LOSS_KEYS = ("L_e", "L_o", "L_e2o", "L_o2e", "L_s", "L")
HISTORY_HEADER = ("epoch", "train_acc", "train_logloss", "test_acc", "test_logloss", *LOSS_KEYS)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, last_finite_epoch: int):
        super().__init__(f"non-finite loss in epoch {epoch}; last finite epoch was {last_finite_epoch}")
        self.epoch = epoch
        self.last_finite_epoch = last_finite_epoch


def build_dataset(data: DataConfig) -> Dataset:
    return _cached_dataset(json.dumps(asdict(data), sort_keys=True))


@functools.lru_cache(maxsize=8)
def _cached_dataset(key: str) -> Dataset:
    d = DataConfig(**json.loads(key))
    spec = make_scene_spec(
        d.C_s,
        d.C_e,
        d.C_o,
        seed=d.spec_seed,
        noise_sigma=d.noise_sigma,
        tag_noise_ratio=d.tag_noise_ratio,
        grid_rows=d.grid_rows,
        grid_cols=d.grid_cols,
        n_images=d.n_images,
        image_size=d.image_size,
        channels=d.channels,
        event_gain=d.event_gain,
        object_gain=d.object_gain,
        event_threshold=d.event_threshold,
        object_threshold=d.object_threshold,
    )
    return generate_dataset(spec, d.n, d.seed)


def _check_dims(cfg: RunConfig, ds: Dataset) -> None:
    s = ds.spec
    got = (s.C_s, s.C_e, s.C_o, s.grid_rows, s.grid_cols, s.image_size, s.channels)
    want = (cfg.data.C_s, cfg.data.C_e, cfg.data.C_o, cfg.data.grid_rows, cfg.data.grid_cols,
            cfg.data.image_size, cfg.data.channels)
    if got != want:
        raise ConfigError(f"dataset dims {got} do not match config dims {want}")


def _split_metrics(model: AVSCModel, ds: Dataset, idx: np.ndarray) -> Metrics:
    probs = model.predict_proba(ds.audio[idx], ds.images[idx])
    return scene_metrics(probs, ds.scene[idx], model.cfg.accuracy)


def _sample_rngs(cfg: RunConfig, epoch: int, idx: np.ndarray):
    if not (cfg.ceoa_active and cfg.ceoa.mode == "rkm"):
        return None
    # keyed by dataset index, so draws do not depend on batch size or order
    return [np.random.default_rng([cfg.seed, 2, epoch, int(i)]) for i in idx]


def train(cfg: RunConfig, dataset: Dataset | None = None, out_dir=None) -> tuple[Metrics, Checkpoint]:
    """Train from scratch; returns final test metrics (with per-epoch history) and a checkpoint."""
    cfg.validate()
    ds = dataset if dataset is not None else build_dataset(cfg.data)
    _check_dims(cfg, ds)
    model = AVSCModel(cfg)
    params = model.active_params()
    o = cfg.optim
    opt = AdamW(params, lr=o.lr, beta1=o.beta1, beta2=o.beta2, eps=o.eps, weight_decay=o.weight_decay)

    tr = _split_metrics(model, ds, ds.train_idx)
    te = _split_metrics(model, ds, ds.test_idx)
    history = [_record(0, tr, te, None)]
    for epoch in range(1, cfg.epochs + 1):
        order = ds.train_idx[np.random.default_rng([cfg.seed, 1, epoch]).permutation(len(ds.train_idx))]
        sums = dict.fromkeys(LOSS_KEYS, 0.0)
        probs = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            out = model.forward(ds.audio[idx], ds.images[idx])
            bundle = model.losses(
                out, ds.event_label[idx], ds.object_label[idx], ds.scene_onehot[idx], _sample_rngs(cfg, epoch, idx)
            )
            comps = bundle.components()
            if not math.isfinite(comps["L"]):
                raise TrainingDiverged(epoch, epoch - 1)
            opt.zero_grad()
            nc.backward(bundle.L)
            opt.step()
            for key in LOSS_KEYS:
                sums[key] += comps[key] * len(idx)
            probs.append(out.scene.probs.data)
        if not all(np.all(np.isfinite(p.data)) for p in params):
            raise TrainingDiverged(epoch, epoch - 1)
        tr = scene_metrics(np.concatenate(probs), ds.scene[order], cfg.accuracy)
        te = _split_metrics(model, ds, ds.test_idx)
        history.append(_record(epoch, tr, te, {k: v / len(order) for k, v in sums.items()}))
        log.debug("epoch %d train acc %.4f test acc %.4f", epoch, tr.acc, te.acc)

    metrics = Metrics(acc=te.acc, logloss=te.logloss, history=history)
    ckpt = Checkpoint(params={n: p.data.copy() for n, p in model.params.items()}, config=cfg.copy(), epoch=cfg.epochs)
    if out_dir is not None:
        out = Path(out_dir)
        ckpt.save(out / "checkpoint.json")
        cfg.save(out / "config.json")
        write_history(out / "history.csv", history)
    return metrics, ckpt


def _record(epoch: int, tr: Metrics, te: Metrics, losses: dict | None) -> dict:
    rec = {"epoch": epoch, "train_acc": tr.acc, "train_logloss": tr.logloss, "test_acc": te.acc, "test_logloss": te.logloss}
    rec.update(losses or dict.fromkeys(LOSS_KEYS))
    return rec


def write_history(path, history: list[dict]) -> Path:
    return write_csv(path, HISTORY_HEADER, history)


def model_from_checkpoint(ckpt: Checkpoint) -> AVSCModel:
    cfg = ckpt.config.copy()
    params = {name: Tensor(arr, requires_grad=True) for name, arr in ckpt.params.items()}
    return AVSCModel(cfg, params=params)


def evaluate(ckpt: Checkpoint, split: str = "test", dataset: Dataset | None = None) -> Metrics:
    """Scene metrics of a checkpoint on a dataset split; parameters are left untouched."""
    model = model_from_checkpoint(ckpt)
    ds = dataset if dataset is not None else build_dataset(model.cfg.data)
    _check_dims(model.cfg, ds)
    return _split_metrics(model, ds, ds.split(split))
