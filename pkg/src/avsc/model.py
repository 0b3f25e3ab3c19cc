"""Wiring of branches, alignment and fusion into one trainable model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numcore as nc
from .branches import (
    BranchOutput,
    Params,
    audio_forward,
    bce_loss,
    init_audio_params,
    init_visual_params,
    uniform_init,
    visual_forward,
)
from .ceoa import contrastive_loss_e2o, contrastive_loss_o2e, select_bank
from .fusion import (
    LossBundle,
    MhaParams,
    ScenePrediction,
    ce_loss,
    fusion_head_from,
    init_fusion_head,
    init_mha_params,
    sf_forward,
    total_loss,
)
from .harness.config import RunConfig
from .numcore import Tensor


@dataclass
class ModelOutput:
    event: BranchOutput | None
    object: BranchOutput | None
    scene: ScenePrediction


def init_params(cfg: RunConfig, seed: int) -> Params:
    """Every parameter of every configuration, drawn in a fixed order.

    Ablation variants of one seed therefore start from identical weights for
    the parts they share.
    """
    rng = np.random.default_rng([seed, 0])
    f = cfg.fusion
    C_s, C_e, C_o = cfg.data.C_s, cfg.data.C_e, cfg.data.C_o
    params: Params = {}
    params.update(init_audio_params(cfg.audio, rng))
    params.update(init_visual_params(cfg.visual, rng))
    init_mha_params(params, rng, "fusion.eo", f.n_heads, f.head_dim)
    init_mha_params(params, rng, "fusion.oe", f.n_heads, f.head_dim)
    init_fusion_head(params, rng, "fusion.head", C_e + C_o, f.hidden, C_s)
    for name, width in (("scene_audio", C_e), ("scene_visual", C_o)):
        params[f"{name}.W"] = uniform_init(rng, (width, C_s), width)
        params[f"{name}.b"] = uniform_init(rng, (C_s,), width)
    return params


class AVSCModel:
    def __init__(self, cfg: RunConfig, params: Params | None = None, seed: int | None = None):
        cfg.validate()
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, cfg.seed if seed is None else seed)

    def active_names(self) -> list[str]:
        """Parameters that can receive gradient under the current configuration."""
        m = self.cfg.modality
        keep = []
        for name in self.params:
            root = name.split(".")[0]
            if root == "audio" and m in ("both", "audio"):
                keep.append(name)
            elif root == "visual" and m in ("both", "visual"):
                keep.append(name)
            elif root == "fusion" and m == "both":
                if name.startswith(("fusion.eo", "fusion.oe")) and not self.cfg.use_sf:
                    continue
                keep.append(name)
            elif root == f"scene_{m}":
                keep.append(name)
        return keep

    def active_params(self) -> list[Tensor]:
        return [self.params[n] for n in self.active_names()]

    def forward(self, audio: np.ndarray, images: np.ndarray) -> ModelOutput:
        cfg, p = self.cfg, self.params
        m = cfg.modality
        ev = audio_forward(audio, cfg.audio, p) if m in ("both", "audio") else None
        ob = visual_forward(images, cfg.visual, p) if m in ("both", "visual") else None
        if m == "both":
            scene = sf_forward(
                ev,
                ob,
                MhaParams.from_params(p, "fusion.eo", cfg.fusion.n_heads),
                MhaParams.from_params(p, "fusion.oe", cfg.fusion.n_heads),
                fusion_head_from(p, "fusion.head"),
                fusion_input=cfg.fusion.fusion_input,
                use_attention=cfg.use_sf,
            )
        else:
            out = ev if m == "audio" else ob
            x = out.logits if cfg.fusion.fusion_input == "logits" else out.probs
            logits = nc.matmul(x, p[f"scene_{m}.W"]) + p[f"scene_{m}.b"]
            scene = ScenePrediction(logits=logits, probs=nc.softmax_rows(logits))
        return ModelOutput(event=ev, object=ob, scene=scene)

    def losses(
        self,
        out: ModelOutput,
        event_label: np.ndarray,
        object_label: np.ndarray,
        scene_onehot: np.ndarray,
        rngs: Sequence[np.random.Generator] | None = None,
    ) -> LossBundle:
        cfg = self.cfg
        zero = Tensor(0.0)
        L_e = bce_loss(out.event.probs, event_label) if out.event is not None else zero
        L_o = bce_loss(out.object.probs, object_label) if out.object is not None else zero
        L_e2o = L_o2e = zero
        if cfg.ceoa_active:
            bank = select_bank(out.event.probs, out.object.probs, out.event.head, out.object.head, cfg.ceoa, rngs)
            L_e2o = contrastive_loss_e2o(bank)
            L_o2e = contrastive_loss_o2e(bank)
        L_s = ce_loss(out.scene, scene_onehot)
        return total_loss(L_e, L_o, L_e2o, L_o2e, L_s, cfg.effective_weights())

    def predict_proba(self, audio: np.ndarray, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
        chunks = []
        with nc.no_grad():
            for start in range(0, len(audio), batch_size):
                sl = slice(start, start + batch_size)
                chunks.append(self.forward(audio[sl], images[sl]).scene.probs.data)
        return np.concatenate(chunks, axis=0)
