"""Scaled-down audio (patch transformer) and visual (depthwise-conv) branches.

Both branches are batch-first: audio features are ``[B, T, F]`` and image
sequences ``[B, N, H, W, ch]``. Each ends in a linear+ReLU embedding of width
``embed_dim`` followed by a classifier head whose weight rows are the per-class
vectors used for contrastive alignment.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from . import numcore as nc
from .errors import ConfigError, ShapeError
from .numcore import Tensor

Params = Dict[str, Tensor]

# full-scale values of the reference architecture; desk defaults live in the configs
FULL_SCALE_AUDIO_LAYERS = 12
FULL_SCALE_AUDIO_HEADS = 12
FULL_SCALE_AUDIO_DIM = 768
FULL_SCALE_VISUAL_BLOCKS = (3, 3, 27, 3)
FULL_SCALE_VISUAL_CHANNELS = (128, 256, 512, 1024)

PROB_EPS = 1e-12


@dataclass
class AudioBranchConfig:
    patch_rows: int = 8
    patch_cols: int = 4
    n_layers: int = 2
    n_heads: int = 2
    d_model: int = 32
    d_ff: int = 64
    embed_dim: int = 32
    C_e: int = 12
    grid_rows: int = 32
    grid_cols: int = 16
    positional: bool = True

    def validate(self) -> None:
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.C_e < 2:
            raise ConfigError(f"C_e must be >= 2, got {self.C_e}")
        if self.grid_rows % self.patch_rows or self.grid_cols % self.patch_cols:
            raise ConfigError(
                f"grid {self.grid_rows}x{self.grid_cols} not divisible by patch "
                f"{self.patch_rows}x{self.patch_cols}"
            )

    @property
    def n_patches(self) -> int:
        return (self.grid_rows // self.patch_rows) * (self.grid_cols // self.patch_cols)


@dataclass
class VisualBranchConfig:
    stage_blocks: list[int] = field(default_factory=lambda: [1, 1, 2, 1])
    stage_channels: list[int] = field(default_factory=lambda: [4, 8, 16, 32])
    in_channels: int = 1
    kernel: int = 7
    expand: int = 4
    embed_dim: int = 32
    C_o: int = 16
    activation: str = "relu"

    def validate(self) -> None:
        if len(self.stage_blocks) != len(self.stage_channels) or not self.stage_blocks:
            raise ConfigError("stage_blocks and stage_channels must be non-empty and equal length")
        if any(b < 1 for b in self.stage_blocks):
            raise ConfigError("every stage needs at least one block")
        if any(c2 < c1 for c1, c2 in zip(self.stage_channels, self.stage_channels[1:])):
            raise ConfigError(f"stage_channels must be non-decreasing, got {self.stage_channels}")
        if self.C_o < 2:
            raise ConfigError(f"C_o must be >= 2, got {self.C_o}")
        if self.activation != "relu":
            raise ConfigError(f"only the relu activation is implemented, got {self.activation!r}")

    @property
    def downsample(self) -> int:
        # stem halves once, then once between consecutive stages
        return 2 ** len(self.stage_channels)


@dataclass
class ClassifierHead:
    """Last classification layer: logits = emb @ W.T + b, one row of W per class."""

    W: Tensor
    b: Tensor

    def __call__(self, emb: Tensor) -> Tensor:
        return nc.matmul(emb, nc.transpose(self.W)) + self.b


@dataclass
class BranchOutput:
    logits: Tensor
    probs: Tensor
    head: ClassifierHead


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _linear_params(params: Params, rng, name: str, n_in: int, n_out: int) -> None:
    params[f"{name}.W"] = uniform_init(rng, (n_in, n_out), n_in)
    params[f"{name}.b"] = uniform_init(rng, (n_out,), n_in)


def linear(params: Params, name: str, x: Tensor) -> Tensor:
    return nc.matmul(x, params[f"{name}.W"]) + params[f"{name}.b"]


def init_audio_params(cfg: AudioBranchConfig, rng: np.random.Generator, prefix: str = "audio") -> Params:
    cfg.validate()
    p: Params = {}
    patch_dim = cfg.patch_rows * cfg.patch_cols
    _linear_params(p, rng, f"{prefix}.patch", patch_dim, cfg.d_model)
    if cfg.positional:
        p[f"{prefix}.pos"] = uniform_init(rng, (cfg.n_patches, cfg.d_model), cfg.d_model)
    for layer in range(cfg.n_layers):
        base = f"{prefix}.layer{layer}"
        for proj in ("q", "k", "v", "o"):
            _linear_params(p, rng, f"{base}.attn.{proj}", cfg.d_model, cfg.d_model)
        _linear_params(p, rng, f"{base}.ff1", cfg.d_model, cfg.d_ff)
        _linear_params(p, rng, f"{base}.ff2", cfg.d_ff, cfg.d_model)
    _linear_params(p, rng, f"{prefix}.embed", cfg.d_model, cfg.embed_dim)
    p[f"{prefix}.head.W"] = uniform_init(rng, (cfg.C_e, cfg.embed_dim), cfg.embed_dim)
    p[f"{prefix}.head.b"] = uniform_init(rng, (cfg.C_e,), cfg.embed_dim)
    return p


def init_visual_params(cfg: VisualBranchConfig, rng: np.random.Generator, prefix: str = "visual") -> Params:
    cfg.validate()
    p: Params = {}
    chans = cfg.stage_channels
    _linear_params(p, rng, f"{prefix}.stem", 4 * cfg.in_channels, chans[0])
    for s, (n_blocks, c) in enumerate(zip(cfg.stage_blocks, chans)):
        if s > 0:
            _linear_params(p, rng, f"{prefix}.down{s}", 4 * chans[s - 1], c)
        for blk in range(n_blocks):
            base = f"{prefix}.stage{s}.block{blk}"
            k2 = cfg.kernel * cfg.kernel
            p[f"{base}.dw.k"] = uniform_init(rng, (cfg.kernel, cfg.kernel, c), k2)
            p[f"{base}.dw.b"] = uniform_init(rng, (c,), k2)
            _linear_params(p, rng, f"{base}.pw1", c, cfg.expand * c)
            _linear_params(p, rng, f"{base}.pw2", cfg.expand * c, c)
    _linear_params(p, rng, f"{prefix}.embed", chans[-1], cfg.embed_dim)
    p[f"{prefix}.head.W"] = uniform_init(rng, (cfg.C_o, cfg.embed_dim), cfg.embed_dim)
    p[f"{prefix}.head.b"] = uniform_init(rng, (cfg.C_o,), cfg.embed_dim)
    return p


def patchify(features: Tensor, rows: int, cols: int) -> Tensor:
    """``[B, T, F]`` -> ``[B, n_patches, rows*cols]`` in row-major patch order."""
    B, T, F = features.shape
    if T % rows or F % cols:
        raise ShapeError(f"feature grid {T}x{F} not divisible by patch {rows}x{cols}")
    x = nc.reshape(features, (B, T // rows, rows, F // cols, cols))
    x = nc.permute(x, (0, 1, 3, 2, 4))
    return nc.reshape(x, (B, (T // rows) * (F // cols), rows * cols))


def self_attention(params: Params, base: str, x: Tensor, n_heads: int) -> Tensor:
    B, n, d_model = x.shape
    dh = d_model // n_heads

    def split(t: Tensor) -> Tensor:
        return nc.permute(nc.reshape(t, (B, n, n_heads, dh)), (0, 2, 1, 3))

    q = split(linear(params, f"{base}.q", x))
    k = split(linear(params, f"{base}.k", x))
    v = split(linear(params, f"{base}.v", x))
    att = nc.softmax_rows(nc.scale(nc.matmul(q, nc.transpose(k)), 1.0 / math.sqrt(dh)))
    heads = nc.matmul(att, v)
    merged = nc.reshape(nc.permute(heads, (0, 2, 1, 3)), (B, n, d_model))
    return linear(params, f"{base}.o", merged)


def _head(params: Params, prefix: str) -> ClassifierHead:
    return ClassifierHead(W=params[f"{prefix}.head.W"], b=params[f"{prefix}.head.b"])


def audio_forward(features, cfg: AudioBranchConfig, params: Params, prefix: str = "audio") -> BranchOutput:
    features = nc._as_tensor(features)
    if features.ndim != 3:
        raise ShapeError(f"audio features must be [B, T, F], got {features.shape}")
    x = linear(params, f"{prefix}.patch", patchify(features, cfg.patch_rows, cfg.patch_cols))
    if cfg.positional:
        pos = params[f"{prefix}.pos"]
        if pos.shape[0] != x.shape[1]:
            raise ShapeError(f"positional table {pos.shape} does not match {x.shape[1]} patches")
        x = x + pos
    for layer in range(cfg.n_layers):
        base = f"{prefix}.layer{layer}"
        x = x + self_attention(params, f"{base}.attn", x, cfg.n_heads)
        x = x + linear(params, f"{base}.ff2", nc.relu(linear(params, f"{base}.ff1", x)))
    emb = nc.relu(linear(params, f"{prefix}.embed", nc.mean(x, axis=1)))
    head = _head(params, prefix)
    logits = head(emb)
    return BranchOutput(logits=logits, probs=nc.sigmoid(logits), head=head)


def space_to_depth(x: Tensor) -> Tensor:
    M, H, W, C = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"cannot downsample {H}x{W} feature map by 2")
    x = nc.reshape(x, (M, H // 2, 2, W // 2, 2, C))
    x = nc.permute(x, (0, 1, 3, 2, 4, 5))
    return nc.reshape(x, (M, H // 2, W // 2, 4 * C))


def conv_block(params: Params, base: str, x: Tensor) -> Tensor:
    y = nc.depthwise_conv2d(x, params[f"{base}.dw.k"]) + params[f"{base}.dw.b"]
    y = linear(params, f"{base}.pw2", nc.relu(linear(params, f"{base}.pw1", y)))
    return x + y


def visual_forward(image_seq, cfg: VisualBranchConfig, params: Params, prefix: str = "visual") -> BranchOutput:
    image_seq = nc._as_tensor(image_seq)
    if image_seq.ndim != 5:
        raise ShapeError(f"image sequence must be [B, N, H, W, ch], got {image_seq.shape}")
    B, N, H, W, ch = image_seq.shape
    if N < 1:
        raise ShapeError("image sequence needs at least one frame")
    if ch != cfg.in_channels:
        raise ShapeError(f"expected {cfg.in_channels} channels, got {ch}")
    if H % cfg.downsample or W % cfg.downsample:
        raise ShapeError(f"image {H}x{W} too small or not divisible by total downsampling {cfg.downsample}")
    x = nc.reshape(image_seq, (B * N, H, W, ch))
    x = linear(params, f"{prefix}.stem", space_to_depth(x))
    for s, n_blocks in enumerate(cfg.stage_blocks):
        if s > 0:
            x = linear(params, f"{prefix}.down{s}", space_to_depth(x))
        for blk in range(n_blocks):
            x = conv_block(params, f"{prefix}.stage{s}.block{blk}", x)
    pooled = nc.mean(x, axis=(1, 2))
    per_clip = nc.mean(nc.reshape(pooled, (B, N, pooled.shape[-1])), axis=1)
    emb = nc.relu(linear(params, f"{prefix}.embed", per_clip))
    head = _head(params, prefix)
    logits = head(emb)
    return BranchOutput(logits=logits, probs=nc.sigmoid(logits), head=head)


def bce_loss(probs: Tensor, labels) -> Tensor:
    """Binary cross-entropy summed over classes; averaged over a leading batch axis.

    Probabilities are clamped to ``[1e-12, 1 - 1e-12]`` before the logs.
    """
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape != probs.shape:
        raise ShapeError(f"bce_loss: probs {probs.shape} vs labels {labels.shape}")
    p = nc.clamp(probs, PROB_EPS, 1.0 - PROB_EPS)
    per_class = labels * nc.log(p) + (1.0 - labels) * nc.log(1.0 - p)
    total = nc.neg(nc.sum_(per_class, axis=-1))
    return nc.mean(total) if total.ndim else total
