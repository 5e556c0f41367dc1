"""Deterministic synthetic oriented scenes: filled rotated rectangles on noise."""
from __future__ import annotations

import colorsys
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import GenerationError
from .geometry import normalize_angle, points_in_box, rotated_iou
from .matching import GroundTruthSet


@dataclass
class SceneConfig:
    image_size: int = 64
    num_objects: tuple[int, int] = (2, 3)
    num_classes: int = 3
    size_range: tuple[float, float] = (0.25, 0.4)
    aspect_range: tuple[float, float] = (0.4, 0.65)
    angle_range: tuple[float, float] = (-0.5 * math.pi, 0.5 * math.pi)
    max_overlap: float = 0.0
    noise: float = 0.05
    supersample: int = 4
    max_tries: int = 500

    @classmethod
    def from_experiment(cls, cfg) -> "SceneConfig":
        d = cfg.dataset
        return cls(image_size=cfg.model.image_size, num_objects=tuple(d.num_objects),
                   num_classes=cfg.model.num_classes, size_range=tuple(d.size_range),
                   aspect_range=tuple(d.aspect_range), angle_range=tuple(d.angle_range),
                   max_overlap=d.max_overlap, noise=d.noise)


@dataclass
class SyntheticScene:
    image: np.ndarray        # [H, W, 3]
    gts: GroundTruthSet
    seed: int
    coverage: list[np.ndarray] = field(default_factory=list, repr=False)  # per-object [H, W] in [0, 1]

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "image_shape": list(self.image.shape),
            "objects": [
                {"cx": float(b[0]), "cy": float(b[1]), "w": float(b[2]), "h": float(b[3]),
                 "alpha_radians": float(b[4]), "class": int(c)}
                for b, c in zip(self.gts.boxes, self.gts.labels)
            ],
        }


def class_color(c: int, num_classes: int) -> np.ndarray:
    r, g, b = colorsys.hsv_to_rgb((c / max(num_classes, 1)) % 1.0, 0.85, 0.95)
    return np.array([r, g, b])


def box_coverage(box, size: int, supersample: int = 4) -> np.ndarray:
    """Fraction of every pixel covered by ``box``, from a regular sub-pixel grid."""
    s = supersample
    sub = (np.arange(size * s) + 0.5) / (size * s)
    gy, gx = np.meshgrid(sub, sub, indexing="ij")
    inside = points_in_box(box, gx, gy).astype(np.float64)
    return inside.reshape(size, s, size, s).mean(axis=(1, 3))


def _stripes(box, size: int, c: int) -> np.ndarray:
    """Class-dependent shading stripes running across the box's long edge."""
    cx, cy, w, h, a = box
    centres = (np.arange(size) + 0.5) / size
    gy, gx = np.meshgrid(centres, centres, indexing="ij")
    u = (gx - cx) * math.cos(a) + (gy - cy) * math.sin(a)
    period = w / (2 + c % 3)
    return 0.85 + 0.15 * np.cos(2 * math.pi * u / period)


def _sample_box(rng: np.random.Generator, cfg: SceneConfig) -> tuple:
    w = rng.uniform(*cfg.size_range)
    h = w * rng.uniform(*cfg.aspect_range)
    a = normalize_angle(rng.uniform(*cfg.angle_range))
    c, s = abs(math.cos(a)), abs(math.sin(a))
    ex, ey = 0.5 * (w * c + h * s), 0.5 * (w * s + h * c)
    if ex >= 0.5 or ey >= 0.5:
        return None
    cx = rng.uniform(ex, 1.0 - ex)
    cy = rng.uniform(ey, 1.0 - ey)
    return (cx, cy, w, h, a)


def generate_scene(seed: int, cfg: SceneConfig = SceneConfig()) -> SyntheticScene:
    """Render a scene; the output is a pure function of ``(seed, cfg)``."""
    rng = np.random.default_rng(seed)
    lo, hi = cfg.num_objects
    n = int(rng.integers(lo, hi + 1))
    boxes, labels = [], []
    for _ in range(n):
        for _ in range(cfg.max_tries):
            box = _sample_box(rng, cfg)
            if box is None:
                continue
            if all(rotated_iou(box, other) <= cfg.max_overlap for other in boxes):
                break
        else:
            raise GenerationError(f"could not place object {len(boxes)} after {cfg.max_tries} tries (seed {seed})")
        boxes.append(box)
        labels.append(int(rng.integers(cfg.num_classes)))
    S = cfg.image_size
    image = 0.5 + cfg.noise * rng.standard_normal((S, S, 3))
    coverage = []
    for box, c in zip(boxes, labels):
        cov = box_coverage(box, S, cfg.supersample)
        fill = class_color(c, cfg.num_classes)[None, None, :] * _stripes(box, S, c)[:, :, None]
        image = image * (1.0 - cov[:, :, None]) + fill * cov[:, :, None]
        coverage.append(cov)
    gts = GroundTruthSet(np.array(boxes).reshape(-1, 5), np.array(labels, dtype=np.int64))
    return SyntheticScene(image, gts, seed, coverage)


def hflip(scene: SyntheticScene) -> SyntheticScene:
    boxes = scene.gts.boxes.copy()
    boxes[:, 0] = 1.0 - boxes[:, 0]
    boxes[:, 4] = [normalize_angle(-a) for a in boxes[:, 4]]
    return SyntheticScene(scene.image[:, ::-1].copy(), GroundTruthSet(boxes, scene.gts.labels.copy()),
                          scene.seed, [c[:, ::-1].copy() for c in scene.coverage])


def scene_seeds(base_seed: int, count: int) -> list[int]:
    return [base_seed * 1000 + i for i in range(count)]


def make_dataset(cfg) -> list[SyntheticScene]:
    scfg = SceneConfig.from_experiment(cfg)
    return [generate_scene(s, scfg) for s in scene_seeds(cfg.dataset.seed, cfg.dataset.num_scenes)]


def save_scenes(scenes: list[SyntheticScene], out_dir, dump_images: bool = False) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "scenes.json"
    path.write_text(json.dumps([s.to_dict() for s in scenes], indent=2) + "\n", encoding="utf-8")
    if dump_images:
        for s in scenes:
            np.save(out / f"scene_{s.seed}.npy", s.image.astype("<f8"))
    return path


def load_scene_annotations(path) -> list[tuple[int, GroundTruthSet]]:
    """Read ``scenes.json`` back into ``(seed, gts)`` pairs; images regenerate from the seed."""
    items = json.loads(Path(path).read_text(encoding="utf-8"))
    out = []
    for item in items:
        objs = item["objects"]
        boxes = [[o["cx"], o["cy"], o["w"], o["h"], o["alpha_radians"]] for o in objs]
        out.append((int(item["seed"]), GroundTruthSet(np.array(boxes).reshape(-1, 5), [o["class"] for o in objs])))
    return out
