"""Deterministic synthetic audio-visual scenes.

Every scene has a row of event rates and a row of object rates. A sample of
scene ``s`` gets soft tags ``clip(rate_row + jitter)``, binarized at the event
and object thresholds into pseudo labels. Features are rendered from the
active labels: one Gaussian bump per active event on the audio grid, and one
spatial blob per active object in every frame of the image sequence, plus
Gaussian noise.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError

EVENT_THRESHOLD = 0.0365
OBJECT_THRESHOLD = 0.9216
MIN_ROW_DISTANCE = 0.3
TRAIN_FRACTION = 0.7

# entropy tags that keep the independent random streams apart
_TAG_SCENES, _TAG_SAMPLE, _TAG_SPLIT, _TAG_RATES, _TAG_TEMPLATES = range(5)


@dataclass
class SceneSpec:
    C_s: int
    C_e: int
    C_o: int
    event_probs: np.ndarray
    object_probs: np.ndarray
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
    seed: int = 0
    event_templates: np.ndarray = field(default=None, repr=False)
    object_templates: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.event_probs = np.asarray(self.event_probs, dtype=np.float64)
        self.object_probs = np.asarray(self.object_probs, dtype=np.float64)
        if self.event_templates is None or self.object_templates is None:
            self.event_templates, self.object_templates = make_templates(self)
        self.validate()

    def validate(self) -> None:
        if self.event_probs.shape != (self.C_s, self.C_e) or self.object_probs.shape != (self.C_s, self.C_o):
            raise ConfigError("rate matrices do not match class counts")
        for name, rates in (("event", self.event_probs), ("object", self.object_probs)):
            if np.any(rates < 0) or np.any(rates > 1):
                raise ConfigError(f"{name} rates must lie in [0, 1]")
            for a in range(self.C_s):
                for b in range(a + 1, self.C_s):
                    if np.array_equal(rates[a], rates[b]):
                        raise ConfigError(f"scenes {a} and {b} share identical {name} rates")
        for t in (self.event_threshold, self.object_threshold):
            if not 0.0 <= t <= 1.0:
                raise ConfigError(f"threshold {t} outside [0, 1]")
        if self.noise_sigma < 0 or self.tag_noise_ratio < 0:
            raise ConfigError("noise levels must be non-negative")

    @property
    def tag_sigma(self) -> float:
        return self.noise_sigma * self.tag_noise_ratio

    def manifest(self) -> dict:
        d = asdict(self)
        for key in ("event_probs", "object_probs", "event_templates", "object_templates"):
            d.pop(key)
        return d


@dataclass
class Sample:
    scene_label: np.ndarray
    event_soft: np.ndarray
    object_soft: np.ndarray
    event_label: np.ndarray
    object_label: np.ndarray
    audio_features: np.ndarray
    image_seq: np.ndarray

    @property
    def scene(self) -> int:
        return int(np.argmax(self.scene_label))


def _active_rows(rng, C_s, C, n_active):
    if math.comb(C, n_active) < C_s:
        raise ConfigError(f"{C} classes with {n_active} active cannot give {C_s} distinct rows")
    seen: set[tuple[int, ...]] = set()
    rows = []
    while len(rows) < C_s:
        active = tuple(sorted(rng.choice(C, size=n_active, replace=False).tolist()))
        if active not in seen:
            seen.add(active)
            rows.append(active)
    return rows


def make_rates(C_s: int, C_e: int, C_o: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Rate matrices whose scene rows differ by at least 0.3 in max-norm per modality.

    Active events sit in [0.3, 0.9] against inactive 0, and every scene gets its
    own active event set, so event labels alone identify the scene. Active
    objects sit in [0.95, 1] against inactive [0, 0.6]. Scenes ``2j`` and
    ``2j + 1`` share one active object set and differ only below the object
    threshold, so vision alone cannot tell the two apart and audio is needed
    to resolve each pair.
    """
    rng = np.random.default_rng([seed, _TAG_RATES])
    event = np.zeros((C_s, C_e))
    for s, active in enumerate(_active_rows(rng, C_s, C_e, max(1, C_e // 3))):
        event[s, list(active)] = rng.uniform(0.3, 0.9, size=len(active))
    n_groups = (C_s + 1) // 2
    groups = _active_rows(rng, n_groups, C_o, max(1, C_o // 4))
    obj = rng.uniform(0.0, 0.6, size=(C_s, C_o))
    for s in range(C_s):
        obj[s, list(groups[s // 2])] = rng.uniform(0.95, 1.0, size=len(groups[s // 2]))
    for g in range(C_s // 2):
        inactive = np.setdiff1d(np.arange(C_o), groups[g])
        if inactive.size == 0:
            raise ConfigError("paired scenes need at least one inactive object class")
        c = rng.choice(inactive)
        obj[2 * g, c], obj[2 * g + 1, c] = 0.05, 0.55
    return event, obj


def _gauss2d(rows, cols, center, sigma):
    r = np.arange(rows)[:, None]
    c = np.arange(cols)[None, :]
    return np.exp(-0.5 * (((r - center[0]) / sigma[0]) ** 2 + ((c - center[1]) / sigma[1]) ** 2))


def make_templates(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([spec.seed, _TAG_TEMPLATES])
    T, F = spec.grid_rows, spec.grid_cols
    ev = np.empty((spec.C_e, T, F))
    for i in range(spec.C_e):
        center = (rng.uniform(0, T - 1), rng.uniform(0, F - 1))
        sigma = (rng.uniform(1.5, 3.0), rng.uniform(1.0, 2.0))
        ev[i] = spec.event_gain * _gauss2d(T, F, center, sigma)
    S = spec.image_size
    ob = np.empty((spec.C_o, S, S, spec.channels))
    for i in range(spec.C_o):
        center = (rng.uniform(0, S - 1), rng.uniform(0, S - 1))
        sigma = rng.uniform(1.0, 2.5)
        blob = _gauss2d(S, S, center, (sigma, sigma))
        ob[i] = spec.object_gain * blob[:, :, None] * rng.uniform(0.5, 1.0, size=spec.channels)
    return ev, ob


def make_scene_spec(
    C_s: int = 4,
    C_e: int = 12,
    C_o: int = 16,
    seed: int = 0,
    **kwargs,
) -> SceneSpec:
    event, obj = make_rates(C_s, C_e, C_o, seed)
    return SceneSpec(C_s=C_s, C_e=C_e, C_o=C_o, event_probs=event, object_probs=obj, seed=seed, **kwargs)


def binarize_pseudolabels(soft, threshold: float) -> np.ndarray:
    """1 where ``soft >= threshold`` (inclusive), else 0."""
    if not 0.0 <= threshold <= 1.0:
        raise ConfigError(f"threshold {threshold} outside [0, 1]")
    return (np.asarray(soft, dtype=np.float64) >= threshold).astype(np.float64)


def render_features(sample: Sample, spec: SceneSpec, seed) -> tuple[np.ndarray, np.ndarray]:
    """Audio grid and image sequence for the sample's active labels.

    Rendering is linear in the label indicators; noise is added on top.
    """
    rng = np.random.default_rng(seed)
    audio = np.tensordot(sample.event_label, spec.event_templates, axes=1)
    frame = np.tensordot(sample.object_label, spec.object_templates, axes=1)
    images = np.repeat(frame[None], spec.n_images, axis=0)
    if spec.noise_sigma > 0:
        audio = audio + spec.noise_sigma * rng.standard_normal(audio.shape)
        images = images + spec.noise_sigma * rng.standard_normal(images.shape)
    return audio, images


def make_sample(spec: SceneSpec, scene: int, seed) -> Sample:
    rng = np.random.default_rng(seed)
    scene_label = np.zeros(spec.C_s)
    scene_label[scene] = 1.0
    event_soft = np.clip(spec.event_probs[scene] + spec.tag_sigma * rng.standard_normal(spec.C_e), 0.0, 1.0)
    object_soft = np.clip(spec.object_probs[scene] + spec.tag_sigma * rng.standard_normal(spec.C_o), 0.0, 1.0)
    sample = Sample(
        scene_label=scene_label,
        event_soft=event_soft,
        object_soft=object_soft,
        event_label=binarize_pseudolabels(event_soft, spec.event_threshold),
        object_label=binarize_pseudolabels(object_soft, spec.object_threshold),
        audio_features=None,
        image_seq=None,
    )
    sample.audio_features, sample.image_seq = render_features(sample, spec, rng.integers(2**63))
    return sample


@dataclass
class Dataset:
    """Stacked sample arrays plus a stratified train/test split."""

    spec: SceneSpec
    seed: int
    scene: np.ndarray
    event_soft: np.ndarray
    object_soft: np.ndarray
    event_label: np.ndarray
    object_label: np.ndarray
    audio: np.ndarray
    images: np.ndarray
    train_idx: np.ndarray
    test_idx: np.ndarray

    def __len__(self) -> int:
        return len(self.scene)

    def __getitem__(self, i: int) -> Sample:
        return Sample(
            scene_label=self.scene_onehot[i],
            event_soft=self.event_soft[i],
            object_soft=self.object_soft[i],
            event_label=self.event_label[i],
            object_label=self.object_label[i],
            audio_features=self.audio[i],
            image_seq=self.images[i],
        )

    @property
    def scene_onehot(self) -> np.ndarray:
        return np.eye(self.spec.C_s)[self.scene]

    def split(self, name: str) -> np.ndarray:
        if name == "train":
            return self.train_idx
        if name == "test":
            return self.test_idx
        if name == "all":
            return np.arange(len(self))
        raise ConfigError(f"unknown split {name!r}")


def stratified_split(scene: np.ndarray, seed: int, train_fraction: float = TRAIN_FRACTION):
    rng = np.random.default_rng([seed, _TAG_SPLIT])
    train, test = [], []
    for s in np.unique(scene):
        members = np.flatnonzero(scene == s)
        members = members[rng.permutation(len(members))]
        cut = int(round(train_fraction * len(members)))
        train.extend(members[:cut].tolist())
        test.extend(members[cut:].tolist())
    return np.array(sorted(train), dtype=np.intp), np.array(sorted(test), dtype=np.intp)


def generate_dataset(spec: SceneSpec, n: int, seed: int) -> Dataset:
    """Balanced scenes (counts within one of n / C_s); sample i depends only on (seed, i)."""
    if n < spec.C_s:
        raise ConfigError(f"need at least one sample per scene: n={n} < C_s={spec.C_s}")
    order = np.random.default_rng([seed, _TAG_SCENES]).permutation(n)
    scene = (np.arange(n) % spec.C_s)[order]
    samples = [make_sample(spec, int(scene[i]), [seed, _TAG_SAMPLE, i]) for i in range(n)]
    train_idx, test_idx = stratified_split(scene, seed)
    return Dataset(
        spec=spec,
        seed=seed,
        scene=scene.astype(np.intp),
        event_soft=np.stack([s.event_soft for s in samples]),
        object_soft=np.stack([s.object_soft for s in samples]),
        event_label=np.stack([s.event_label for s in samples]),
        object_label=np.stack([s.object_label for s in samples]),
        audio=np.stack([s.audio_features for s in samples]),
        images=np.stack([s.image_seq for s in samples]),
        train_idx=train_idx,
        test_idx=test_idx,
    )


_ARRAYS = ("scene", "event_soft", "object_soft", "event_label", "object_label", "audio", "images", "train_idx", "test_idx")


def save_dataset(ds: Dataset, path) -> Path:
    """Write one ``.npz`` holding a JSON manifest and the flat arrays."""
    path = Path(path)
    manifest = {
        "n": len(ds),
        "seed": ds.seed,
        "spec": ds.spec.manifest(),
        "thresholds": {"event": ds.spec.event_threshold, "object": ds.spec.object_threshold},
        "dims": {name: list(getattr(ds, name).shape) for name in _ARRAYS},
    }
    arrays = {name: getattr(ds, name) for name in _ARRAYS}
    arrays["event_probs"] = ds.spec.event_probs
    arrays["object_probs"] = ds.spec.object_probs
    arrays["event_templates"] = ds.spec.event_templates
    arrays["object_templates"] = ds.spec.object_templates
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, manifest=np.array(json.dumps(manifest)), **arrays)
    return path


def load_dataset(path) -> Dataset:
    with np.load(Path(path), allow_pickle=False) as z:
        manifest = json.loads(str(z["manifest"]))
        spec = SceneSpec(
            event_probs=z["event_probs"],
            object_probs=z["object_probs"],
            event_templates=z["event_templates"],
            object_templates=z["object_templates"],
            **manifest["spec"],
        )
        arrays = {name: z[name] for name in _ARRAYS}
    return Dataset(spec=spec, seed=manifest["seed"], **arrays)
