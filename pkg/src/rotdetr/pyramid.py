"""Multi-scale feature container shared by the encoder, decoder and ROI pooling."""
from __future__ import annotations

from dataclasses import dataclass

from .tensor import Tensor


@dataclass
class FeaturePyramid:
    """Per-level ``[H_l, W_l, C]`` maps ordered finest first.

    ``ratios[l]`` is the downsample factor of ``levels[l]`` relative to the
    input image, strictly increasing toward coarser levels.
    """

    levels: list[Tensor]
    ratios: list[int]

    def __post_init__(self):
        if len(self.levels) != len(self.ratios):
            raise ValueError("one ratio per level required")
        if any(b <= a for a, b in zip(self.ratios, self.ratios[1:])):
            raise ValueError(f"ratios must increase toward coarser levels, got {self.ratios}")
        chans = {lv.shape[2] for lv in self.levels}
        if len(chans) > 1:
            raise ValueError(f"all levels must share one channel count, got {sorted(chans)}")

    @property
    def channels(self) -> int:
        return self.levels[0].shape[2]

    @property
    def shapes(self) -> list[tuple]:
        return [lv.shape for lv in self.levels]

    @property
    def image_size(self) -> int:
        return self.levels[0].shape[0] * self.ratios[0]

    def __len__(self) -> int:
        return len(self.levels)
