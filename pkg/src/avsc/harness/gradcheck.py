"""Finite-difference check of the full training objective on a tiny model."""

from __future__ import annotations

import numpy as np

from ..branches import AudioBranchConfig, VisualBranchConfig
from ..ceoa import ContrastiveConfig
from ..fusion import FusionConfig
from ..model import AVSCModel
from ..numcore import GradCheckReport, fd_floor, grad_check
from .config import DataConfig, RunConfig


def tiny_config(seed: int = 0, mode: str = "lkm") -> RunConfig:
    """Smallest configuration that still runs every module once."""
    return RunConfig(
        data=DataConfig(C_s=3, C_e=4, C_o=4, n=12, grid_rows=8, grid_cols=4, n_images=2, image_size=4),
        audio=AudioBranchConfig(
            patch_rows=4, patch_cols=2, n_layers=1, n_heads=2, d_model=4, d_ff=8, embed_dim=4, C_e=4,
            grid_rows=8, grid_cols=4,
        ),
        visual=VisualBranchConfig(stage_blocks=[1, 1], stage_channels=[2, 4], expand=2, embed_dim=4, C_o=4),
        fusion=FusionConfig(n_heads=2, head_dim=2, hidden=4),
        ceoa=ContrastiveConfig(K=2, mode=mode, rng_seed=seed),
        seed=seed,
    )


def composite_grad_check(
    seed: int = 0,
    mode: str = "lkm",
    batch: int = 3,
    h: float = 1e-5,
    tol: float = 1e-4,
    max_entries: int | None = 6,
    input_scale: float = 1.0,
    cfg: RunConfig | None = None,
) -> GradCheckReport:
    """Check d(total loss)/d(every parameter) of a randomly initialized tiny model.

    Inputs and labels are random; the random-negative stream is rebuilt on each
    evaluation so every finite-difference probe sees the same bank. The error
    floor comes from :func:`fd_floor` at the loss value.
    """
    cfg = cfg if cfg is not None else tiny_config(seed, mode)
    model = AVSCModel(cfg, seed=seed)
    rng = np.random.default_rng([seed, 99])
    d = cfg.data
    audio = input_scale * rng.standard_normal((batch, d.grid_rows, d.grid_cols))
    images = input_scale * rng.standard_normal((batch, d.n_images, d.image_size, d.image_size, d.channels))
    ev = (rng.random((batch, d.C_e)) < 0.5).astype(float)
    ob = (rng.random((batch, d.C_o)) < 0.5).astype(float)
    scene = np.eye(d.C_s)[rng.integers(0, d.C_s, size=batch)]

    def loss():
        rngs = [np.random.default_rng([seed, 2, i]) for i in range(batch)]
        out = model.forward(audio, images)
        return model.losses(out, ev, ob, scene, rngs).L

    params = {n: model.params[n] for n in model.active_names()}
    # some entries (attention key biases) have an exactly zero gradient, which no
    # difference quotient reproduces below its rounding floor
    floor = fd_floor(loss().item(), h)
    return grad_check(loss, params, h=h, tol=tol, max_entries=max_entries, seed=seed, floor=floor)
