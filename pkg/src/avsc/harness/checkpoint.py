"""Checkpoint manifest: named tensors with shapes and exact values, plus the run config."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import ConfigError
from .config import RunConfig


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config: RunConfig
    epoch: int

    def to_dict(self) -> dict:
        # json writes floats with repr(), which round-trips float64 exactly
        return {
            "epoch": self.epoch,
            "config": self.config.to_dict(),
            "tensors": [
                {"name": name, "shape": list(arr.shape), "values": arr.reshape(-1).tolist()}
                for name, arr in self.params.items()
            ],
        }

    @classmethod
    def from_dict(cls, raw: dict) -> Checkpoint:
        params = {}
        for entry in raw["tensors"]:
            values = np.array(entry["values"], dtype=np.float64)
            shape = tuple(entry["shape"])
            if values.size != int(np.prod(shape)):
                raise ConfigError(f"tensor {entry['name']}: {values.size} values for shape {shape}")
            params[entry["name"]] = values.reshape(shape)
        return cls(params=params, config=RunConfig.from_dict(raw["config"]), epoch=int(raw["epoch"]))

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict()))
        return path

    @classmethod
    def load(cls, path) -> Checkpoint:
        return cls.from_dict(json.loads(Path(path).read_text()))
