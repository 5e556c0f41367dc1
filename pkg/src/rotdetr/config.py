"""Experiment configuration: nested dataclasses with a strict JSON loader.

Unknown keys and wrongly typed values are rejected so a typo can never
silently fall back to a default.
"""
from __future__ import annotations

import dataclasses
import json
import math
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .encoder import EncoderConfig
from .errors import ConfigurationError


@dataclass
class DecoderConfig:
    num_layers: int = 2
    num_queries: int = 20
    ffn_dim: int = 64


@dataclass
class ModelConfig:
    image_size: int = 64
    channels: int = 32
    ratios: list[int] = field(default_factory=lambda: [64, 32, 16, 8])
    num_classes: int = 3
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)

    @property
    def stem_ratio(self) -> int:
        return min(self.ratios)


@dataclass
class LossConfig:
    cls: float = 2.0
    l1: float = 5.0
    iou: float = 2.0
    no_object_weight: float = 0.1
    aux: bool = True


@dataclass
class DatasetConfig:
    num_scenes: int = 8
    num_objects: list[int] = field(default_factory=lambda: [2, 3])
    size_range: list[float] = field(default_factory=lambda: [0.25, 0.4])
    aspect_range: list[float] = field(default_factory=lambda: [0.4, 0.65])
    angle_range: list[float] = field(default_factory=lambda: [-0.5 * math.pi, 0.5 * math.pi])
    max_overlap: float = 0.0
    noise: float = 0.05
    hflip: bool = False
    seed: int = 0


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    steps: int = 200
    batch_size: int = 8
    grad_clip: float = 1.0
    lr_drop_step: int = 0
    backbone_lr_scale: float = 1.0


@dataclass
class FinetuneConfig:
    epochs: int = 12
    batch_size: int = 1
    lr: float = 1e-3
    roi_size: int = 7
    hidden: int = 64
    max_shift: float = 0.5
    max_angle_delta: float = math.pi / 6
    grad_clip: float = 1.0


@dataclass
class EvalConfig:
    thresholds: list[float] = field(default_factory=lambda: [0.2, 0.3, 0.4, 0.5])
    ap_iou: float = 0.5


@dataclass
class ExperimentConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "ExperimentConfig":
        m = self.model
        if m.encoder.channels != m.channels:
            raise ConfigurationError("model.encoder.channels must equal model.channels")
        m.encoder.validate()
        ratios = sorted(m.ratios)
        if len(set(ratios)) != len(ratios) or not ratios:
            raise ConfigurationError("model.ratios must be distinct and non-empty")
        for r in ratios:
            if r < 1 or r & (r - 1):
                raise ConfigurationError(f"ratio {r} is not a power of two")
            if m.image_size % r:
                raise ConfigurationError(f"image_size {m.image_size} not divisible by ratio {r}")
        if len(ratios) > 1 and ratios[-1] != 2 * ratios[-2]:
            raise ConfigurationError("the coarsest ratio must be twice the next finer one")
        if m.decoder.num_layers < 1 or m.decoder.num_queries < 1:
            raise ConfigurationError("decoder needs >= 1 layer and >= 1 query")
        if m.num_classes < 1:
            raise ConfigurationError("num_classes must be >= 1")
        d = self.dataset
        if len(d.num_objects) != 2 or not 0 <= d.num_objects[0] <= d.num_objects[1]:
            raise ConfigurationError("dataset.num_objects must be [min, max] with 0 <= min <= max")
        for name in ("size_range", "aspect_range", "angle_range"):
            lo_hi = getattr(d, name)
            if len(lo_hi) != 2 or lo_hi[0] > lo_hi[1]:
                raise ConfigurationError(f"dataset.{name} must be [lo, hi] with lo <= hi")
        if d.size_range[0] <= 0 or d.size_range[1] >= 1:
            raise ConfigurationError("dataset.size_range must lie inside (0, 1)")
        if not 0 < d.aspect_range[0] <= d.aspect_range[1] <= 1:
            raise ConfigurationError("dataset.aspect_range must lie inside (0, 1]")
        if self.optimizer.kind not in ("sgd", "adam"):
            raise ConfigurationError("optimizer.kind must be 'sgd' or 'adam'")
        if self.optimizer.steps < 0 or self.finetune.epochs < 0:
            raise ConfigurationError("step and epoch counts must be >= 0")
        if self.finetune.batch_size < 1 or self.finetune.roi_size < 1:
            raise ConfigurationError("finetune.batch_size and finetune.roi_size must be >= 1")
        if self.optimizer.lr <= 0 or self.optimizer.backbone_lr_scale < 0 or self.finetune.lr <= 0:
            raise ConfigurationError("learning rates must be positive and backbone_lr_scale >= 0")
        if self.optimizer.batch_size < 1:
            raise ConfigurationError("optimizer.batch_size must be >= 1")
        if any(not 0 < t <= 1 for t in self.eval.thresholds):
            raise ConfigurationError("eval.thresholds must lie in (0, 1]")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        return _build(cls, data, "config").validate()

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")


def _check_scalar(tp, value, where: str):
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigurationError(f"{where}: expected bool, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{where}: expected int, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{where}: expected number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigurationError(f"{where}: expected string, got {value!r}")
        return value
    raise ConfigurationError(f"{where}: unsupported field type {tp}")


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{where}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigurationError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for key, value in data.items():
        tp = hints[key]
        sub = f"{where}.{key}"
        if dataclasses.is_dataclass(tp):
            kwargs[key] = _build(tp, value, sub)
        elif typing.get_origin(tp) is list:
            (item_tp,) = typing.get_args(tp)
            if not isinstance(value, list):
                raise ConfigurationError(f"{sub}: expected a list")
            kwargs[key] = [_check_scalar(item_tp, v, f"{sub}[{i}]") for i, v in enumerate(value)]
        else:
            kwargs[key] = _check_scalar(tp, value, sub)
    return cls(**kwargs)


def preset(name: str) -> ExperimentConfig:
    """Named configurations: ``default``, ``overfit`` (acceptance run), ``full_scale``."""
    if name == "default":
        return ExperimentConfig().validate()
    if name == "overfit":
        cfg = ExperimentConfig()
        cfg.model.ratios = [8, 16]
        cfg.model.decoder.num_layers = 2
        cfg.model.encoder.num_layers = 2
        cfg.optimizer.steps = 3000
        return cfg.validate()
    if name == "full_scale":
        cfg = ExperimentConfig()
        cfg.model = ModelConfig(image_size=1024, channels=256, ratios=[64, 32, 16, 8], num_classes=15,
                                encoder=EncoderConfig(num_layers=6, channels=256),
                                decoder=DecoderConfig(num_layers=6, num_queries=1000, ffn_dim=1024))
        cfg.optimizer = OptimizerConfig(kind="adam", lr=1e-4, steps=0, batch_size=2, backbone_lr_scale=0.1)
        cfg.finetune.lr = 1e-4
        return cfg.validate()
    raise ConfigurationError(f"unknown preset {name!r}")
