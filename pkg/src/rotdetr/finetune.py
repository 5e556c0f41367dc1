"""Second-stage refinement on top of a frozen detector.

The trained detector supplies region proposals (its final-layer boxes, no
NMS, no score filtering). Rotated ROI features pooled from the backbone
pyramid feed a small head that predicts bounded residual box deltas and
fresh class scores. Only the head is trained.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .config import ExperimentConfig, FinetuneConfig
from .decoder import DetectionSet
from .errors import FreezeViolation
from .geometry import HALF_PI, rotated_roi_align
from .matching import LossCoefficients, set_loss
from .model import Detector, ForwardOutput
from .nn import MLP, Linear, Module
from .pyramid import FeaturePyramid
from .synth import SyntheticScene
from .train import Adam, clip_grad_norm
from .tensor import Tensor


class FrozenTrunk:
    """A trained detector whose parameters are marked non-trainable.

    The checksum taken at construction is the reference for :meth:`verify`.
    """

    def __init__(self, model: Detector):
        self.model = model
        model.set_trainable(False)
        self.checksum = model.checksum()

    def forward(self, image) -> ForwardOutput:
        return self.model(image, mode="eval", aux=False)

    def verify(self) -> str:
        now = self.model.checksum()
        if now != self.checksum:
            raise FreezeViolation(f"trunk checksum changed: {self.checksum[:16]} -> {now[:16]}")
        if any(p.requires_grad for p in self.model.parameters()):
            raise FreezeViolation("a trunk parameter was marked trainable")
        return now


def propose(trunk: FrozenTrunk, image) -> DetectionSet:
    """Final-layer detections of the trunk, detached; one proposal per query."""
    return trunk.forward(image).final.detach()


def roi_pyramid(backbone: FeaturePyramid) -> FeaturePyramid:
    """Backbone levels used for pooling: all but the extra coarsest level."""
    if len(backbone) < 2:
        return backbone
    return FeaturePyramid(backbone.levels[:-1], backbone.ratios[:-1])


class RefineHead(Module):
    """Box-delta MLP (final layer zero) and a linear class-score layer on pooled ROI features."""

    def __init__(self, rng: np.random.Generator, channels: int, num_classes: int, cfg: FinetuneConfig = FinetuneConfig()):
        self.roi_size = cfg.roi_size
        self.max_shift = cfg.max_shift
        self.max_angle_delta = cfg.max_angle_delta
        n_in = cfg.roi_size * cfg.roi_size * channels
        self.box_mlp = MLP(rng, [n_in, cfg.hidden, cfg.hidden, 5], zero_last=True)
        self.score = Linear(rng, n_in, num_classes + 1)


def roi_features(proposals: DetectionSet, backbone: FeaturePyramid, roi_size: int) -> Tensor:
    """``[N, P*P*C]`` pooled features, one row per proposal."""
    pyr = roi_pyramid(backbone)
    rows = []
    for box in proposals.boxes.data:
        patch, _ = rotated_roi_align(pyr, box, roi_size)
        rows.append(T.reshape(patch, (1, -1)))
    return T.concat(rows, axis=0)


def wrap_angle(alpha: Tensor) -> Tensor:
    """Shift into ``[-pi/2, pi/2)`` by whole periods; the shift is piecewise constant."""
    a = alpha.data
    k = np.floor((a + HALF_PI) / math.pi)
    out = a - math.pi * k
    k = k + (out >= HALF_PI) - (out < -HALF_PI)
    if not np.any(k):
        return alpha
    return T.sub(alpha, math.pi * k)


def decode_residual(proposals: np.ndarray, u: Tensor, max_shift: float, max_angle_delta: float) -> Tensor:
    """Apply bounded deltas ``d = 2 sigmoid(u) - 1`` to proposal boxes.

    Centre moves by ``d * max_shift * (w, h)`` in the proposal's own frame,
    sizes scale by ``2**d``, the angle shifts by ``d * max_angle_delta``.
    ``u = 0`` returns the proposals exactly.
    """
    P = np.asarray(proposals, dtype=np.float64).reshape(-1, 5)
    d = T.sub(T.mul(T.sigmoid(u), 2.0), 1.0)
    w, h, a = P[:, 2], P[:, 3], P[:, 4]
    c, s = np.cos(a), np.sin(a)
    du = T.mul(d[:, 0], max_shift * w)
    dv = T.mul(d[:, 1], max_shift * h)
    cx = T.add(P[:, 0], T.sub(T.mul(du, c), T.mul(dv, s)))
    cy = T.add(P[:, 1], T.add(T.mul(du, s), T.mul(dv, c)))
    ln2 = math.log(2.0)
    nw = T.mul(T.exp(T.mul(d[:, 2], ln2)), w)
    nh = T.mul(T.exp(T.mul(d[:, 3], ln2)), h)
    na = wrap_angle(T.add(a, T.mul(d[:, 4], max_angle_delta)))
    return T.stack([cx, cy, nw, nh, na], axis=1)


def refine(proposals: DetectionSet, backbone: FeaturePyramid, head: RefineHead,
           features: Optional[Tensor] = None) -> DetectionSet:
    """Refined boxes (residual on proposals) with head-predicted class logits."""
    if features is None:
        features = roi_features(proposals, backbone, head.roi_size)
    u = head.box_mlp(features)
    boxes = decode_residual(proposals.boxes.data, u, head.max_shift, head.max_angle_delta)
    return DetectionSet(boxes, head.score(features))


@dataclass
class FinetuneResult:
    head: RefineHead
    losses: list[float] = field(default_factory=list)
    checksum: str = ""


@dataclass
class _Cached:
    proposals: DetectionSet
    features: Tensor


def finetune(trunk: FrozenTrunk, head: RefineHead, scenes: list[SyntheticScene],
             cfg: ExperimentConfig) -> FinetuneResult:
    """Train ``head`` on refined detections; the trunk must come out bit-identical.

    Proposals and pooled features are computed once per scene since the
    trunk cannot change. Matching is re-run at every step.
    """
    trunk.verify()
    fc = cfg.finetune
    coeffs = LossCoefficients(cfg.loss.cls, cfg.loss.l1, cfg.loss.iou)
    cache = []
    for s in scenes:
        out = trunk.forward(s.image)
        props = out.final.detach()
        cache.append(_Cached(props, roi_features(props, out.backbone, head.roi_size)))
    params = head.parameters()
    opt = Adam(params, fc.lr)
    losses = []
    n = len(scenes)
    per_epoch = max(1, math.ceil(n / fc.batch_size))
    for step in range(fc.epochs * per_epoch):
        start = (step % per_epoch) * fc.batch_size
        idx = list(range(start, min(start + fc.batch_size, n)))
        acc = [np.zeros_like(p.data) for p in params]
        total = 0.0
        for i in idx:
            T.zero_grad(params)
            with T.Tape(seed=step):
                det = refine(cache[i].proposals, None, head, cache[i].features)
                loss, _ = set_loss(det, scenes[i].gts, coeffs, cfg.loss.no_object_weight)
                T.backward(loss)
            total += loss.item()
            for a, p in zip(acc, params):
                if p.grad is not None:
                    a += p.grad
        T.zero_grad(params)
        grads, _ = clip_grad_norm([a / len(idx) for a in acc], fc.grad_clip)
        opt.step(grads)
        losses.append(total / len(idx))
    checksum = trunk.verify()
    return FinetuneResult(head, losses, checksum)


def refine_scenes(trunk: FrozenTrunk, head: RefineHead, scenes: list[SyntheticScene]) -> list[DetectionSet]:
    out = []
    for s in scenes:
        fwd = trunk.forward(s.image)
        out.append(refine(fwd.final.detach(), fwd.backbone, head))
    return out
