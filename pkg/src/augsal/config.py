"""Run configuration: one YAML file drives every CLI subcommand.

Parsing is strict: unknown keys fail with the offending key named, the seed
is mandatory, and every output carries the hash of the resolved config.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Tuple

import yaml

from .augmentor import AugmentConfig
from .backbone import BackboneConfig
from .errors import ConfigError, ValidationError
from .metrics import DEFAULT_BLUR_SIGMA_PX
from .objectives import LossWeights
from .readouts import ReadoutConfig


@dataclass(frozen=True)
class DatasetSection:
    root: str
    train_split: str = "train"
    val_split: str = "val"
    num_classes: int = 3
    synthetic_n_train: int = 500
    synthetic_n_val: int = 80
    synthetic_dims: Tuple[int, int] = (32, 32)
    synthetic_fixations: int = 20
    synthetic_max_objects: int = 3

    def __post_init__(self):
        object.__setattr__(self, "synthetic_dims", tuple(self.synthetic_dims))


@dataclass(frozen=True)
class MetricsSection:
    blur_sigma_px: float = DEFAULT_BLUR_SIGMA_PX
    sauc_shuffle_images: int = 10
    sauc_seed: int = 0


@dataclass(frozen=True)
class TrainingSection:
    backbone_steps: int = 2000
    backbone_lr: float = 1e-3
    readout_steps: int = 20000
    saliency_steps: int = 22000
    lr_features: float = 5e-5
    lr_readouts: float = 1e-4
    batch_size: int = 8


@dataclass(frozen=True)
class EditSection:
    pivot: str = "gamma_projected"
    max_halvings: int = 6
    intensities: Tuple[float, float, float] = (0.5, 1.0, 1.5)
    stats_patches_per_image: int = 2
    stats_patch_frac: Tuple[float, float] = (0.2, 0.5)
    decoder_fit_samples: int = 20000

    def __post_init__(self):
        object.__setattr__(self, "intensities", tuple(self.intensities))
        object.__setattr__(self, "stats_patch_frac", tuple(self.stats_patch_frac))


@dataclass(frozen=True)
class RunConfig:
    seed: int
    output_dir: str
    dataset: DatasetSection
    backbone: BackboneConfig = BackboneConfig()
    readouts: ReadoutConfig = ReadoutConfig()
    loss_weights: LossWeights = LossWeights()
    augmentor: AugmentConfig = AugmentConfig()
    metrics: MetricsSection = MetricsSection()
    training: TrainingSection = TrainingSection()
    edit: EditSection = EditSection()

    def config_hash(self) -> str:
        return hashlib.sha256(
            json.dumps(_as_plain(self), sort_keys=True).encode()).hexdigest()[:16]

    @property
    def out(self) -> Path:
        return Path(self.output_dir)


def _as_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _as_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, Mapping):
        return {str(k): _as_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_as_plain(v) for v in obj]
    if isinstance(obj, Path):
        return str(obj)
    return obj


_SECTION_TYPES = {
    "dataset": DatasetSection,
    "backbone": BackboneConfig,
    "readouts": ReadoutConfig,
    "loss_weights": LossWeights,
    "augmentor": AugmentConfig,
    "metrics": MetricsSection,
    "training": TrainingSection,
    "edit": EditSection,
}


def _build_section(cls, mapping, section: str):
    if mapping is None:
        mapping = {}
    if not isinstance(mapping, Mapping):
        raise ConfigError(f"config section {section!r} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    for key in mapping:
        if key not in names:
            raise ConfigError(f"unknown config key {section}.{key}")
    kwargs = dict(mapping)
    if cls is AugmentConfig and "alpha_ranges" in kwargs:
        kwargs["alpha_ranges"] = {k: tuple(v) for k, v in kwargs["alpha_ranges"].items()}
    try:
        return cls(**kwargs)
    except (ValidationError, TypeError) as exc:
        raise ConfigError(f"invalid config section {section!r}: {exc}") from exc


def config_from_dict(raw: Mapping) -> RunConfig:
    if not isinstance(raw, Mapping):
        raise ConfigError("config root must be a mapping")
    known = {"seed", "output_dir", *_SECTION_TYPES}
    for key in raw:
        if key not in known:
            raise ConfigError(f"unknown config key {key}")
    if "seed" not in raw:
        raise ConfigError("missing mandatory config key: seed")
    if "output_dir" not in raw:
        raise ConfigError("missing mandatory config key: output_dir")
    if "dataset" not in raw or not isinstance(raw["dataset"], Mapping) \
            or "root" not in raw["dataset"]:
        raise ConfigError("missing mandatory config key: dataset.root")
    sections = {name: _build_section(cls, raw.get(name), name)
                for name, cls in _SECTION_TYPES.items()}
    return RunConfig(seed=int(raw["seed"]), output_dir=str(raw["output_dir"]),
                     **sections)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        try:
            raw = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    return config_from_dict(raw or {})
