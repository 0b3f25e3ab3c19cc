"""Cross-directional attention between event and object class vectors.

Each class contributes one scalar feature (its logit by default), so the
per-head projections map 1 -> d. Objects attend over events and events over
objects; both attention outputs are added back to their own class vectors,
concatenated, and classified into scenes by a two-layer head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import numcore as nc
from .branches import PROB_EPS, BranchOutput, Params, uniform_init
from .errors import ConfigError, ShapeError
from .numcore import Tensor

FULL_SCALE_HEADS = 8
FULL_SCALE_HEAD_DIM = 64


@dataclass
class FusionConfig:
    n_heads: int = 2
    head_dim: int = 8
    hidden: int = 32
    fusion_input: str = "logits"

    def validate(self) -> None:
        if self.n_heads < 1 or self.head_dim < 1 or self.hidden < 1:
            raise ConfigError("fusion sizes must be positive")
        if self.fusion_input not in ("logits", "probs"):
            raise ConfigError(f"fusion_input must be 'logits' or 'probs', got {self.fusion_input!r}")


@dataclass
class MhaParams:
    wq: list[Tensor]
    wk: list[Tensor]
    wv: list[Tensor]
    wo: Tensor

    @property
    def h(self) -> int:
        return len(self.wq)

    @property
    def d(self) -> int:
        return self.wq[0].shape[1]

    @classmethod
    def from_params(cls, params: Params, prefix: str, n_heads: int) -> MhaParams:
        return cls(
            wq=[params[f"{prefix}.wq{i}"] for i in range(n_heads)],
            wk=[params[f"{prefix}.wk{i}"] for i in range(n_heads)],
            wv=[params[f"{prefix}.wv{i}"] for i in range(n_heads)],
            wo=params[f"{prefix}.wo"],
        )


@dataclass
class FusionHead:
    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.W1.shape[0]:
            raise ShapeError(f"fusion head expects width {self.W1.shape[0]}, got {x.shape}")
        return nc.matmul(nc.relu(nc.matmul(x, self.W1) + self.b1), self.W2) + self.b2


@dataclass
class ScenePrediction:
    logits: Tensor
    probs: Tensor


@dataclass
class LossWeights:
    l1: float = 1.0
    l2: float = 1.0
    l3: float = 1.0
    l4: float = 1.0
    l5: float = 1.0

    def as_tuple(self) -> tuple[float, ...]:
        return tuple(getattr(self, f.name) for f in fields(self))

    @classmethod
    def of(cls, values) -> LossWeights:
        values = tuple(float(v) for v in values)
        if len(values) != 5:
            raise ConfigError(f"need 5 loss weights, got {len(values)}")
        return cls(*values)

    def validate(self) -> None:
        vals = self.as_tuple()
        if any(v < 0 or not math.isfinite(v) for v in vals):
            raise ConfigError(f"loss weights must be finite and non-negative, got {vals}")
        if not any(v > 0 for v in vals):
            raise ConfigError("at least one loss weight must be positive")


@dataclass
class LossBundle:
    L_e: Tensor
    L_o: Tensor
    L_e2o: Tensor
    L_o2e: Tensor
    L_s: Tensor
    L: Tensor

    def components(self) -> dict[str, float]:
        return {
            "L_e": self.L_e.item(),
            "L_o": self.L_o.item(),
            "L_e2o": self.L_e2o.item(),
            "L_o2e": self.L_o2e.item(),
            "L_s": self.L_s.item(),
            "L": self.L.item(),
        }


def init_mha_params(params: Params, rng: np.random.Generator, prefix: str, n_heads: int, head_dim: int) -> None:
    for i in range(n_heads):
        for name in ("wq", "wk", "wv"):
            params[f"{prefix}.{name}{i}"] = uniform_init(rng, (1, head_dim), 1)
    params[f"{prefix}.wo"] = uniform_init(rng, (n_heads * head_dim, 1), n_heads * head_dim)


def init_fusion_head(params: Params, rng: np.random.Generator, prefix: str, n_in: int, hidden: int, C_s: int) -> None:
    params[f"{prefix}.W1"] = uniform_init(rng, (n_in, hidden), n_in)
    params[f"{prefix}.b1"] = uniform_init(rng, (hidden,), n_in)
    params[f"{prefix}.W2"] = uniform_init(rng, (hidden, C_s), hidden)
    params[f"{prefix}.b2"] = uniform_init(rng, (C_s,), hidden)


def fusion_head_from(params: Params, prefix: str) -> FusionHead:
    return FusionHead(*(params[f"{prefix}.{n}"] for n in ("W1", "b1", "W2", "b2")))


def mha(q: Tensor, k: Tensor, v: Tensor, p: MhaParams, return_attention: bool = False):
    """Multi-head attention on per-class scalar features.

    ``q`` is ``[..., n_q, 1]``; ``k`` and ``v`` are ``[..., n_k, 1]``. All heads
    are projected at once and split afterwards; the result is ``[..., n_q, 1]``.
    With ``return_attention`` the ``[..., h, n_q, n_k]`` weights come back too.
    """
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"mha: keys {k.shape} and values {v.shape} differ in length")
    if q.shape[-1] != 1 or k.shape[-1] != 1 or v.shape[-1] != 1:
        raise ShapeError(f"mha: expects trailing feature width 1, got {q.shape}, {k.shape}, {v.shape}")
    h, d = p.h, p.d
    lead = q.shape[:-2]

    def heads(x: Tensor, ws: list[Tensor]) -> Tensor:
        proj = nc.matmul(x, nc.concat(ws, axis=1))
        n = x.shape[-2]
        split = nc.reshape(proj, (*lead, n, h, d))
        nd = split.ndim
        return nc.permute(split, (*range(nd - 3), nd - 2, nd - 3, nd - 1))

    Q, K, V = heads(q, p.wq), heads(k, p.wk), heads(v, p.wv)
    att = nc.softmax_rows(nc.scale(nc.matmul(Q, nc.transpose(K)), 1.0 / math.sqrt(d)))
    out = nc.matmul(att, V)
    nd = out.ndim
    merged = nc.reshape(nc.permute(out, (*range(nd - 3), nd - 2, nd - 3, nd - 1)), (*lead, q.shape[-2], h * d))
    result = nc.matmul(merged, p.wo)
    return (result, att) if return_attention else result


def _class_vector(out: BranchOutput, fusion_input: str) -> Tensor:
    x = out.logits if fusion_input == "logits" else out.probs
    return nc.reshape(x, (*x.shape, 1))


def sf_forward(
    event_out: BranchOutput,
    object_out: BranchOutput,
    p_eo: MhaParams,
    p_oe: MhaParams,
    head: FusionHead,
    fusion_input: str = "logits",
    use_attention: bool = True,
) -> ScenePrediction:
    """Scene prediction from event/object class vectors.

    ``p_eo`` drives objects-attending-to-events, ``p_oe`` the reverse. With
    ``use_attention=False`` the plain class vectors are concatenated instead.
    """
    e = _class_vector(event_out, fusion_input)
    o = _class_vector(object_out, fusion_input)
    if use_attention:
        o_by_e = mha(o, e, e, p_eo)
        e_by_o = mha(e, o, o, p_oe)
        e, o = e_by_o + e, o_by_e + o
    joint = nc.concat([e, o], axis=-2)
    joint = nc.reshape(joint, joint.shape[:-1])
    logits = head(joint)
    return ScenePrediction(logits=logits, probs=nc.softmax_rows(logits))


def ce_loss(pred: ScenePrediction, y_s) -> Tensor:
    """Scene cross-entropy on one-hot targets; averaged over a leading batch axis."""
    y = np.asarray(y_s, dtype=np.float64)
    if y.shape != pred.probs.shape:
        raise ShapeError(f"ce_loss: probs {pred.probs.shape} vs labels {y.shape}")
    if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=-1) == 1)):
        raise ValueError("ce_loss: labels must be one-hot")
    logp = nc.log(nc.clamp(pred.probs, PROB_EPS, 1.0))
    per_sample = nc.neg(nc.sum_(y * logp, axis=-1))
    return nc.mean(per_sample) if per_sample.ndim else per_sample


def total_loss(L_e: Tensor, L_o: Tensor, L_e2o: Tensor, L_o2e: Tensor, L_s: Tensor, w: LossWeights) -> LossBundle:
    parts = (L_e, L_o, L_e2o, L_o2e, L_s)
    if any(not np.all(np.isfinite(p.data)) for p in parts):
        raise ValueError("total_loss: non-finite component")
    L = None
    for lam, part in zip(w.as_tuple(), parts):
        term = nc.scale(part, lam)
        L = term if L is None else L + term
    return LossBundle(L_e, L_o, L_e2o, L_o2e, L_s, L)
