"""Run configuration: nested dataclasses mirrored one-to-one by a JSON file."""

from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from ..branches import AudioBranchConfig, VisualBranchConfig
from ..ceoa import ContrastiveConfig
from ..errors import ConfigError
from ..fusion import FusionConfig, LossWeights
from ..synthdata import EVENT_THRESHOLD, OBJECT_THRESHOLD

FULL_SCALE_LR = 5e-6
FULL_SCALE_EPOCHS = 100
FULL_SCALE_BATCH = 16

MODALITIES = ("both", "audio", "visual")


@dataclass
class DataConfig:
    C_s: int = 4
    C_e: int = 12
    C_o: int = 16
    n: int = 400
    noise_sigma: float = 1.0
    tag_noise_ratio: float = 0.01
    grid_rows: int = 32
    grid_cols: int = 16
    n_images: int = 3
    image_size: int = 16
    channels: int = 1
    event_gain: float = 2.0
    object_gain: float = 1.0
    event_threshold: float = EVENT_THRESHOLD
    object_threshold: float = OBJECT_THRESHOLD
    spec_seed: int = 0
    seed: int = 0


@dataclass
class OptimConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    audio: AudioBranchConfig = field(default_factory=AudioBranchConfig)
    visual: VisualBranchConfig = field(default_factory=VisualBranchConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    ceoa: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)
    use_ceoa: bool = True
    use_sf: bool = True
    modality: str = "both"
    batch_size: int = 16
    epochs: int = 60
    seed: int = 0
    accuracy: str = "macro"
    out_dir: str = "runs"

    def validate(self) -> None:
        d = self.data
        self.audio.validate()
        self.visual.validate()
        self.fusion.validate()
        self.loss_weights.validate()
        if self.audio.C_e != d.C_e or self.visual.C_o != d.C_o:
            raise ConfigError(
                f"branch class counts (C_e={self.audio.C_e}, C_o={self.visual.C_o}) "
                f"disagree with data (C_e={d.C_e}, C_o={d.C_o})"
            )
        if (self.audio.grid_rows, self.audio.grid_cols) != (d.grid_rows, d.grid_cols):
            raise ConfigError("audio grid size disagrees with data grid size")
        if self.visual.in_channels != d.channels:
            raise ConfigError("visual input channels disagree with data channels")
        if d.image_size % self.visual.downsample:
            raise ConfigError(f"image size {d.image_size} not divisible by downsampling {self.visual.downsample}")
        if self.audio.embed_dim != self.visual.embed_dim:
            raise ConfigError("event and object heads need the same embedding width for alignment")
        if d.C_s < 2:
            raise ConfigError("need at least two scenes")
        if d.n < d.C_s:
            raise ConfigError(f"n={d.n} smaller than C_s={d.C_s}")
        if self.modality not in MODALITIES:
            raise ConfigError(f"modality must be one of {MODALITIES}, got {self.modality!r}")
        if self.accuracy not in ("macro", "micro"):
            raise ConfigError(f"accuracy must be 'macro' or 'micro', got {self.accuracy!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.optim.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.ceoa_active:
            self.ceoa.validate(d.C_e, d.C_o)

    @property
    def ceoa_active(self) -> bool:
        w = self.loss_weights
        return self.use_ceoa and self.modality == "both" and (w.l3 > 0 or w.l4 > 0)

    def effective_weights(self) -> LossWeights:
        w = dataclasses.replace(self.loss_weights)
        if not self.ceoa_active:
            w.l3 = w.l4 = 0.0
        if self.modality == "audio":
            w.l2 = 0.0
        elif self.modality == "visual":
            w.l1 = 0.0
        return w

    def with_classes(self, C_e: int | None = None, C_o: int | None = None) -> RunConfig:
        cfg = self.copy()
        if C_e is not None:
            cfg.data.C_e = cfg.audio.C_e = C_e
        if C_o is not None:
            cfg.data.C_o = cfg.visual.C_o = C_o
        return cfg

    def copy(self) -> RunConfig:
        return copy.deepcopy(self)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> RunConfig:
        return _build(cls, raw, "config")

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path

    @classmethod
    def load(cls, path) -> RunConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))


def _build(klass, raw, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object, got {type(raw).__name__}")
    known = {f.name: f for f in dataclasses.fields(klass)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    defaults = klass()
    kwargs = {}
    for name, value in raw.items():
        current = getattr(defaults, name)
        if dataclasses.is_dataclass(current):
            kwargs[name] = _build(type(current), value, f"{where}.{name}")
        elif isinstance(current, list):
            kwargs[name] = list(value)
        else:
            kwargs[name] = value
    return klass(**kwargs)


def preset(name: str) -> RunConfig:
    """``desk`` (small model, lr 1e-3, 60 epochs) or ``paper`` (full-scale lr 5e-6, 100 epochs, batch 16)."""
    cfg = RunConfig()
    if name == "desk":
        return cfg
    if name == "paper":
        cfg.optim.lr = FULL_SCALE_LR
        cfg.epochs = FULL_SCALE_EPOCHS
        cfg.batch_size = FULL_SCALE_BATCH
        return cfg
    raise ConfigError(f"unknown preset {name!r}; expected 'desk' or 'paper'")
