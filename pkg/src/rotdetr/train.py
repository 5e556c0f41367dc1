"""Optimisers and the end-to-end training loop for the toy detector."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .config import ExperimentConfig, OptimizerConfig
from .errors import DivergenceError
from .matching import LossCoefficients, set_loss
from .model import Detector
from .synth import SyntheticScene, hflip, make_dataset


class SGD:
    """Gradient descent with heavy-ball momentum; ``scales`` multiply the step per parameter."""

    def __init__(self, params, lr: float, momentum: float = 0.9, weight_decay: float = 0.0, scales=None):
        self.params = list(params)
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.scales = list(scales) if scales is not None else [1.0] * len(self.params)
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: list[np.ndarray], lr: Optional[float] = None) -> None:
        lr = self.lr if lr is None else lr
        for p, v, g, k in zip(self.params, self.velocity, grads, self.scales):
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data = p.data - (lr * k) * v


class Adam:
    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0, scales=None):
        self.params = list(params)
        self.scales = list(scales) if scales is not None else [1.0] * len(self.params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads: list[np.ndarray], lr: Optional[float] = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v, g, k in zip(self.params, self.m, self.v, grads, self.scales):
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - (lr * k) * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(params, cfg: OptimizerConfig, lr: Optional[float] = None, scales=None):
    lr = cfg.lr if lr is None else lr
    if cfg.kind == "sgd":
        return SGD(params, lr, cfg.momentum, cfg.weight_decay, scales)
    return Adam(params, lr, cfg.beta1, cfg.beta2, weight_decay=cfg.weight_decay, scales=scales)


def lr_scales(model: Detector, backbone_scale: float) -> list[float]:
    """Per-parameter step multipliers: ``backbone_scale`` for stem and neck, 1 elsewhere."""
    return [backbone_scale if name.startswith(("stem.", "neck.")) else 1.0
            for name, _ in model.named_parameters()]


def clip_grad_norm(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    """Scale all gradients together so their global L2 norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        grads = [g * scale for g in grads]
    return grads, norm


def tape_seed(seed: int, step: int, item: int) -> int:
    return (seed * 1_000_003 + step) * 1009 + item


def batch_indices(step: int, batch_size: int, n: int) -> list[int]:
    return [(step * batch_size + j) % n for j in range(batch_size)]


@dataclass
class TrainResult:
    model: Detector
    losses: list[float]
    grad_norms: list[float] = field(default_factory=list)
    seconds: float = 0.0


def loss_and_grads(model: Detector, scene: SyntheticScene, cfg: ExperimentConfig,
                   seed: int) -> tuple[float, list[np.ndarray]]:
    params = model.parameters()
    T.zero_grad(params)
    coeffs = LossCoefficients(cfg.loss.cls, cfg.loss.l1, cfg.loss.iou)
    with T.Tape(seed=seed):
        out = model(scene.image, mode="train", aux=cfg.loss.aux)
        if not all(np.isfinite(d.boxes.data).all() and np.isfinite(d.logits.data).all() for d in out.detections):
            return math.nan, []
        loss, _ = set_loss(out.detections, scene.gts, coeffs, cfg.loss.no_object_weight)
        T.backward(loss)
    grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    T.zero_grad(params)
    return loss.item(), grads


def train(cfg: ExperimentConfig, scenes: Optional[list[SyntheticScene]] = None,
          model: Optional[Detector] = None,
          callback: Optional[Callable[[int, float], None]] = None) -> TrainResult:
    """Mini-batch training; batches cycle through ``scenes`` in a fixed order.

    Fully deterministic for a given config: initialisation, scene order and
    dropout masks all derive from ``cfg.seed``.
    """
    cfg.validate()
    if scenes is None:
        scenes = make_dataset(cfg)
    if model is None:
        model = Detector(cfg.model, cfg.seed)
    oc = cfg.optimizer
    params = model.parameters()
    opt = make_optimizer(params, oc, scales=lr_scales(model, oc.backbone_lr_scale))
    losses, norms = [], []
    t0 = time.perf_counter()
    for step in range(oc.steps):
        acc = [np.zeros_like(p.data) for p in params]
        total = 0.0
        idx = batch_indices(step, oc.batch_size, len(scenes))
        for j, i in enumerate(idx):
            scene = scenes[i]
            if cfg.dataset.hflip and (step // len(scenes)) % 2 == 1:
                scene = hflip(scene)
            value, grads = loss_and_grads(model, scene, cfg, tape_seed(cfg.seed, step, j))
            if not math.isfinite(value):
                raise DivergenceError(f"non-finite loss {value} at step {step}")
            total += value
            for a, g in zip(acc, grads):
                a += g
        grads = [a / len(idx) for a in acc]
        grads, norm = clip_grad_norm(grads, oc.grad_clip)
        if not math.isfinite(norm):
            raise DivergenceError(f"non-finite gradient norm at step {step}")
        lr = oc.lr * (0.1 if oc.lr_drop_step and step >= oc.lr_drop_step else 1.0)
        opt.step(grads, lr)
        losses.append(total / len(idx))
        norms.append(norm)
        if callback is not None:
            callback(step, losses[-1])
    return TrainResult(model, losses, norms, time.perf_counter() - t0)


def predict(model: Detector, scenes: list[SyntheticScene]):
    """Final-layer detections for each scene in eval mode (no tape)."""
    return [model(s.image, mode="eval", aux=False).final for s in scenes]
