"""Stem + pyramid + encoder + decoder wired into one detector."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .decoder import Decoder, DetectionSet
from .encoder import Encoder, PyramidNeck, Stem
from .nn import Module
from .pyramid import FeaturePyramid


@dataclass
class ForwardOutput:
    detections: list[DetectionSet]   # one per decoder layer (or only the last)
    backbone: FeaturePyramid         # pre-encoder pyramid
    memory: FeaturePyramid           # encoded pyramid

    @property
    def final(self) -> DetectionSet:
        return self.detections[-1]


class Detector(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        ratios = sorted(cfg.ratios)
        self.stem = Stem(rng, cfg.stem_ratio, cfg.channels)
        self.neck = PyramidNeck(rng, ratios, cfg.stem_ratio, self.stem.out_channels, cfg.channels)
        self.encoder = Encoder(rng, cfg.encoder, len(ratios))
        self.decoder = Decoder(rng, cfg.channels, cfg.decoder.num_queries, cfg.decoder.num_layers,
                               cfg.num_classes, cfg.decoder.ffn_dim)

    def backbone(self, image) -> FeaturePyramid:
        return self.neck(self.stem(image))

    def __call__(self, image, mode: str = "eval", aux: bool = True) -> ForwardOutput:
        pyr = self.backbone(image)
        memory = self.encoder(pyr, mode)
        return ForwardOutput(self.decoder(memory, aux=aux), pyr, memory)
