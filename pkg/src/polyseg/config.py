"""Pipeline configuration: one YAML document drives every stage. Unknown keys
are rejected with the offending key name."""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .data import AugmentationConfig
from .detection import DetectorTrainConfig
from .losses import LossWeights
from .models import ArchitectureKind, ModelConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    n_polyps: int = 12
    n_nonpolyps: int = 4
    seed: int = 7
    image_size: tuple[int, int] = (64, 64)


@dataclass
class DetectorConfig:
    kind: str = "anchor"  # anchor | oracle
    channels: int = 32
    seed: int = 0
    score_threshold: float = 0.5
    nms_iou: float = 0.5
    train: DetectorTrainConfig = field(default_factory=DetectorTrainConfig)


@dataclass
class SegmenterConfig:
    kind: str = "reference"
    mask_threshold: float = 0.5


@dataclass
class CliConfig:
    root: str = "run"
    seed: int = 0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    segmenter: SegmenterConfig = field(default_factory=SegmenterConfig)
    architectures: list[str] = field(default_factory=lambda: ["unet", "pspnet", "fpn", "linknet", "manet"])
    model: ModelConfig = field(default_factory=ModelConfig)
    model_overrides: dict = field(default_factory=dict)  # per-arch ModelConfig overrides
    training: TrainConfig = field(default_factory=TrainConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    eval_threshold: float = 0.5
    train_mask_source: str = "sam"  # sam | gt: targets for segmentation training
    eval_mask_source: str = "gt"
    augment_training: bool = False

    def model_config_for(self, arch: str) -> ModelConfig:
        base = self.model.to_dict()
        base["arch"] = arch
        base["input_size"] = list(self.dataset.image_size)
        overrides = self.model_overrides.get(arch, {})
        for key, value in overrides.items():
            if key not in base:
                raise ConfigError(f"unknown key {key!r} in model_overrides.{arch}")
            base[key] = value
        return ModelConfig.from_dict(base)


_NESTED = {
    "dataset": DatasetConfig,
    "augmentation": AugmentationConfig,
    "detector": DetectorConfig,
    "segmenter": SegmenterConfig,
    "model": ModelConfig,
    "training": TrainConfig,
    "loss_weights": LossWeights,
}
_DETECTOR_NESTED = {"train": DetectorTrainConfig}
_TRAIN_NESTED = {"loss_weights": LossWeights, "augmentation": AugmentationConfig}


def _build(cls, data: dict, section: str, nested: dict | None = None):
    if not isinstance(data, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in section {section!r}")
        if nested and key in nested and isinstance(value, dict):
            value = _build(nested[key], value, f"{section}.{key}")
        if key in ("image_size", "input_size", "scale_range") and isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid section {section!r}: {exc}") from exc


def config_from_dict(doc: dict) -> CliConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a mapping")
    known = {f.name for f in fields(CliConfig)}
    kwargs = {}
    for key, value in doc.items():
        if key not in known:
            raise ConfigError(f"unknown key {key!r} at top level")
        if key in _NESTED and isinstance(value, dict):
            nested = None
            if key == "detector":
                nested = _DETECTOR_NESTED
            elif key == "training":
                nested = _TRAIN_NESTED
            value = _build(_NESTED[key], value, key, nested)
        kwargs[key] = value
    cfg = CliConfig(**kwargs)
    for arch in cfg.architectures:
        try:
            ArchitectureKind(arch)
        except ValueError:
            raise ConfigError(f"unknown architecture {arch!r}") from None
    if cfg.train_mask_source not in ("sam", "gt") or cfg.eval_mask_source not in ("sam", "gt"):
        raise ConfigError("mask sources must be 'sam' or 'gt'")
    return cfg


def load_config(path: Path) -> CliConfig:
    doc = yaml.safe_load(Path(path).read_text())
    return config_from_dict(doc or {})
