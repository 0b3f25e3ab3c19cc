"""Contrastive event-object alignment over classifier weight rows.

For every sample the K most probable event and object classes supply the
positive rows; the negatives are either the K least probable remaining classes
(``lkm``) or K classes drawn at random from outside the positive set (``rkm``).
Selection is plain index bookkeeping and carries no gradient; the gathered rows
stay on the tape so the contrastive losses update exactly those head rows.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numcore as nc
from .branches import ClassifierHead
from .errors import ConfigError
from .numcore import Tensor

MODES = ("lkm", "rkm")


@dataclass
class ContrastiveConfig:
    K: int = 3
    mode: str = "lkm"
    rng_seed: int = 0
    normalize: bool = False

    def validate(self, C_e: int, C_o: int) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"unknown negative mode {self.mode!r}; expected one of {MODES}")
        limit = min(C_e, C_o) // 2
        if not 1 <= self.K <= limit:
            raise ConfigError(f"K={self.K} outside [1, {limit}] for C_e={C_e}, C_o={C_o}")


@dataclass
class ContrastiveBank:
    P_e: Tensor
    N_e: Tensor
    P_o: Tensor
    N_o: Tensor
    idx_pe: np.ndarray
    idx_ne: np.ndarray
    idx_po: np.ndarray
    idx_no: np.ndarray
    K: int
    mode: str


def positive_indices(probs: np.ndarray, K: int) -> np.ndarray:
    """Top-K classes per row; equal probabilities go to the lower index."""
    order = np.argsort(-probs, axis=-1, kind="stable")
    return order[..., :K]


def negative_indices(
    probs: np.ndarray,
    positives: np.ndarray,
    K: int,
    mode: str,
    rngs: Sequence[np.random.Generator] | None = None,
) -> np.ndarray:
    probs = np.atleast_2d(probs)
    positives = np.atleast_2d(positives)
    C = probs.shape[-1]
    out = np.empty((probs.shape[0], K), dtype=np.intp)
    for row, (p, pos) in enumerate(zip(probs, positives)):
        mask = np.ones(C, dtype=bool)
        mask[pos] = False
        allowed = np.flatnonzero(mask)
        if mode == "lkm":
            out[row] = allowed[np.argsort(p[allowed], kind="stable")[:K]]
        elif mode == "rkm":
            if rngs is None:
                raise ConfigError("rkm negatives need a random generator per sample")
            out[row] = np.sort(rngs[row].choice(allowed, size=K, replace=False))
        else:
            raise ConfigError(f"unknown negative mode {mode!r}")
    return out


def select_bank(
    probs_e,
    probs_o,
    event_head: ClassifierHead,
    object_head: ClassifierHead,
    cfg: ContrastiveConfig,
    rngs: Sequence[np.random.Generator] | np.random.Generator | None = None,
) -> ContrastiveBank:
    """Pick positive/negative weight rows for each sample.

    ``probs_e``/``probs_o`` are ``[C]`` or ``[B, C]`` (Tensors or arrays). Banks
    come back batched as ``[B, K, D]``. For ``rkm`` pass one generator per
    sample (a single generator is accepted for B == 1); each generator draws
    the event negatives first, then the object negatives.
    """
    pe = np.atleast_2d(probs_e.data if isinstance(probs_e, Tensor) else np.asarray(probs_e, dtype=float))
    po = np.atleast_2d(probs_o.data if isinstance(probs_o, Tensor) else np.asarray(probs_o, dtype=float))
    cfg.validate(pe.shape[-1], po.shape[-1])
    if isinstance(rngs, np.random.Generator):
        rngs = [rngs]
    if rngs is None and cfg.mode == "rkm":
        rngs = [np.random.default_rng([cfg.rng_seed, i]) for i in range(pe.shape[0])]
    idx_pe = positive_indices(pe, cfg.K)
    idx_po = positive_indices(po, cfg.K)
    if cfg.mode == "rkm":
        idx_ne = np.empty_like(idx_pe)
        idx_no = np.empty_like(idx_po)
        for i, rng in enumerate(rngs):
            idx_ne[i] = negative_indices(pe[i], idx_pe[i], cfg.K, "rkm", [rng])[0]
            idx_no[i] = negative_indices(po[i], idx_po[i], cfg.K, "rkm", [rng])[0]
    else:
        idx_ne = negative_indices(pe, idx_pe, cfg.K, "lkm")
        idx_no = negative_indices(po, idx_po, cfg.K, "lkm")
    W_e, W_o = event_head.W, object_head.W
    if cfg.normalize:
        W_e, W_o = _unit_rows(W_e), _unit_rows(W_o)
    return ContrastiveBank(
        P_e=nc.row_select(W_e, idx_pe),
        N_e=nc.row_select(W_e, idx_ne),
        P_o=nc.row_select(W_o, idx_po),
        N_o=nc.row_select(W_o, idx_no),
        idx_pe=idx_pe,
        idx_ne=idx_ne,
        idx_po=idx_po,
        idx_no=idx_no,
        K=cfg.K,
        mode=cfg.mode,
    )


def _unit_rows(W: Tensor) -> Tensor:
    norm = np.sqrt((W.data**2).sum(axis=-1, keepdims=True)) + 1e-12
    y = W.data / norm

    def fn(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)

    return nc._make(y, (W,), fn, "unit_rows")


def _pair_loss(anchor: Tensor, pos: Tensor, negs: Tensor) -> Tensor:
    pp = nc.matmul(anchor, nc.transpose(pos))
    pn = nc.matmul(anchor, nc.transpose(negs))
    per_sample = nc.neg(nc.log(nc.mean(nc.sigmoid(pp - pn), axis=(-2, -1))))
    return nc.mean(per_sample) if per_sample.ndim else per_sample


def contrastive_loss_e2o(bank: ContrastiveBank) -> Tensor:
    """Event rows as anchors against object positives and negatives; batch-averaged."""
    return _pair_loss(bank.P_e, bank.P_o, bank.N_o)


def contrastive_loss_o2e(bank: ContrastiveBank) -> Tensor:
    return _pair_loss(bank.P_o, bank.P_e, bank.N_e)
