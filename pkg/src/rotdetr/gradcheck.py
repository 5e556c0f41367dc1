"""Finite-difference verification of every differentiable operation.

Each check builds a few leaf tensors and a closure returning a scalar.
Non-scalar outputs are reduced by a fixed random projection so every output
element contributes. Inputs are drawn away from kinks (ReLU at zero,
|x| at zero, ties in min/max) so central differences are meaningful.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .config import ModelConfig, DecoderConfig
from .decoder import (CrossAttentionLayer, DetectionSet, QuerySet, ms_cross_attention, spatial_bias,
                      squash_box)
from .encoder import (AttentionLayer, DSConvLayer, EncoderConfig, attention_encoder_layer,
                      dsconv_encoder_layer, fuse_adjacent_levels)
from .finetune import decode_residual
from .geometry import rotated_iou_op, rotated_roi_align
from .matching import GroundTruthSet, set_loss
from .model import Detector
from .pyramid import FeaturePyramid
from .tensor import Tensor

Builder = Callable[[np.random.Generator], tuple[list[Tensor], Callable[[], Tensor]]]


@dataclass
class CheckResult:
    name: str
    rel_error: float
    passed: bool
    seconds: float
    num_inputs: int


def _leaf(x) -> Tensor:
    return Tensor(np.array(x, dtype=np.float64), requires_grad=True)


def _away_from_zero(rng, shape, margin=0.2):
    x = rng.uniform(margin, 1.5, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _project(out: Tensor, seed: int = 12345) -> Tensor:
    r = np.random.default_rng(seed).normal(size=out.shape)
    return T.tsum(T.mul(out, r))


def _unary(fn, sampler):
    def build(rng):
        x = _leaf(sampler(rng))
        return [x], lambda: _project(fn(x))
    return build


def _binary(fn, sa, sb):
    def build(rng):
        a, b = _leaf(sa(rng)), _leaf(sb(rng))
        return [a, b], lambda: _project(fn(a, b))
    return build


def _normal(*shape):
    return lambda rng: rng.normal(size=shape)


def _positive(*shape):
    return lambda rng: rng.uniform(0.3, 2.0, size=shape)


def _pyramid(rng, C=4, shapes=((6, 6), (3, 3))) -> list[Tensor]:
    return [_leaf(rng.normal(size=(H, W, C))) for H, W in shapes]


def _check_minmax(fn):
    def build(rng):
        a = rng.normal(size=(4, 3))
        b = a + _away_from_zero(rng, (4, 3))
        a, b = _leaf(a), _leaf(b)
        return [a, b], lambda: _project(fn(a, b))
    return build


def _check_index(rng):
    x = _leaf(rng.normal(size=(5, 3)))
    idx = np.array([0, 2, 2, 4])
    return [x], lambda: _project(T.index(x, (idx, slice(1, 3))))


def _check_concat_stack(rng):
    a, b = _leaf(rng.normal(size=(2, 3))), _leaf(rng.normal(size=(4, 3)))
    c = _leaf(rng.normal(size=(2, 3)))
    return [a, b, c], lambda: T.add(_project(T.concat([a, b], axis=0)), _project(T.stack([a, c], axis=1), 7))


def _check_reshape_transpose(rng):
    x = _leaf(rng.normal(size=(2, 3, 4)))
    return [x], lambda: _project(T.reshape(T.transpose(x, (2, 0, 1)), (4, 6)))


def _check_reductions(rng):
    x = _leaf(rng.normal(size=(3, 4)))
    return [x], lambda: T.add(_project(T.tsum(x, axis=0)), _project(T.mean(x, axis=1, keepdims=True), 3))


def _check_linear(rng):
    x, w, b = _leaf(rng.normal(size=(5, 4))), _leaf(rng.normal(size=(4, 3))), _leaf(rng.normal(size=3))
    return [x, w, b], lambda: _project(T.linear(x, w, b))


def _check_layer_norm(rng):
    x, g, b = _leaf(rng.normal(size=(4, 6))), _leaf(rng.normal(size=6)), _leaf(rng.normal(size=6))
    return [x, g, b], lambda: _project(T.layer_norm(x, g, b))


def _check_dropout(rng):
    x = _leaf(rng.normal(size=(6, 5)))
    return [x], lambda: _project(T.dropout(x, 0.3, "train", seed=99))


def _check_conv(stride, padding, k=3):
    def build(rng):
        x, w = _leaf(rng.normal(size=(6, 5, 3))), _leaf(rng.normal(size=(k, k, 3, 4)))
        return [x, w], lambda: _project(T.conv2d(x, w, stride, padding))
    return build


def _check_depthwise(rng):
    x, w = _leaf(rng.normal(size=(5, 6, 3))), _leaf(rng.normal(size=(3, 3, 3)))
    return [x, w], lambda: _project(T.depthwise_conv2d(x, w, 1, 1))


def _check_pointwise(rng):
    x, w = _leaf(rng.normal(size=(4, 5, 3))), _leaf(rng.normal(size=(3, 4)))
    return [x, w], lambda: _project(T.pointwise_conv2d(x, w))


def _check_dsconv(rng):
    x = _leaf(rng.normal(size=(5, 5, 3)))
    wd, wp = _leaf(rng.normal(size=(3, 3, 3))), _leaf(rng.normal(size=(3, 4)))
    return [x, wd, wp], lambda: _project(T.dsconv(x, wd, wp, 1, 1))


def _check_resize(rng):
    x = _leaf(rng.normal(size=(3, 4, 2)))
    return [x], lambda: T.add(_project(T.bilinear_resize(x, 7, 5)), _project(T.bilinear_resize(x, 2, 2), 5))


def _check_sample_points(rng):
    x = _leaf(rng.normal(size=(5, 6, 3)))
    px, py = rng.uniform(-1.0, 6.0, size=8), rng.uniform(-1.0, 5.0, size=8)
    return [x], lambda: _project(T.sample_points(x, px, py)[0])


def _random_boxes(rng, n):
    return np.column_stack([rng.uniform(0.35, 0.65, n), rng.uniform(0.35, 0.65, n),
                            rng.uniform(0.25, 0.5, n), rng.uniform(0.15, 0.3, n),
                            rng.uniform(-1.4, 1.4, n)])


def _check_rotated_iou(rng):
    pred = _leaf(_random_boxes(rng, 4))
    target = _random_boxes(rng, 4)
    return [pred], lambda: _project(rotated_iou_op(pred, target))


def _check_roi_align(rng):
    levels = _pyramid(rng)
    pyr = FeaturePyramid(levels, [8, 16])
    box = (0.45, 0.5, 0.5, 0.3, 0.6)
    return levels, lambda: _project(rotated_roi_align(pyr, box, 3, level=0)[0])


def _layer_inputs(module) -> list[Tensor]:
    return module.parameters()


def _check_dsconv_layer(rng):
    levels = _pyramid(rng)
    layer = DSConvLayer(rng, 4, 3)
    f = lambda: _project(T.concat([T.reshape(l, (-1,)) for l in dsconv_encoder_layer(
        FeaturePyramid(levels, [8, 16]), layer).levels]))
    return levels + _layer_inputs(layer), f


def _check_fuse(rng):
    levels = _pyramid(rng, shapes=((6, 6), (3, 3), (2, 2)))
    def f():
        out = fuse_adjacent_levels(FeaturePyramid(levels, [4, 8, 16]), 0.25, "train", seed=3)
        return _project(T.concat([T.reshape(l, (-1,)) for l in out.levels]))
    return levels, f


def _check_attention_layer(rng):
    levels = _pyramid(rng, shapes=((3, 3), (2, 2)))
    layer = AttentionLayer(rng, 4)
    embed = _leaf(rng.normal(size=2))
    def f():
        out = attention_encoder_layer(FeaturePyramid(levels, [8, 16]), layer, embed)
        return _project(T.concat([T.reshape(l, (-1,)) for l in out.levels]))
    return levels + _layer_inputs(layer) + [embed], f


def _check_squash(rng):
    x = _leaf(rng.normal(size=(3, 5)))
    return [x], lambda: _project(squash_box(x))


def _check_spatial_bias(rng):
    refs = _leaf(_random_boxes(rng, 3))
    locs = rng.uniform(0, 1, size=(7, 2))
    return [refs], lambda: _project(spatial_bias(refs, locs))


def _check_cross_attention(rng):
    C = 4
    levels = _pyramid(rng, C, shapes=((3, 3), (2, 2)))
    layer = CrossAttentionLayer(rng, C, 6)
    tgt = _leaf(rng.normal(size=(3, C)))
    ref_logits = _leaf(rng.normal(size=(3, 5)) * 0.5)
    def f():
        q = QuerySet(tgt, ref_logits, squash_box(ref_logits))
        y, _ = ms_cross_attention(tgt, q, FeaturePyramid(levels, [8, 16]), layer)
        return _project(y)
    return levels + _layer_inputs(layer) + [tgt, ref_logits], f


def _check_decode_residual(rng):
    props = _random_boxes(rng, 3)
    u = _leaf(rng.normal(size=(3, 5)))
    return [u], lambda: _project(decode_residual(props, u, 0.5, math.pi / 6))


def _check_set_loss(rng):
    boxes = _leaf(_random_boxes(rng, 4))
    logits = _leaf(rng.normal(size=(4, 4)))
    gts = GroundTruthSet(_random_boxes(rng, 2), [0, 2])
    return [boxes, logits], lambda: set_loss(DetectionSet(boxes, logits), gts)[0]


def toy_model_config() -> ModelConfig:
    """2 encoder layers, 1 decoder layer, 8 channels, 3 queries, 2 pyramid levels."""
    return ModelConfig(image_size=32, channels=8, ratios=[8, 16], num_classes=2,
                       encoder=EncoderConfig(num_layers=2, channels=8, dropout_rate=0.1),
                       decoder=DecoderConfig(num_layers=1, num_queries=3, ffn_dim=16))


def _check_end_to_end(rng):
    model = Detector(toy_model_config(), seed=int(rng.integers(1 << 30)))
    image = rng.uniform(0, 1, size=(32, 32, 3))
    gts = GroundTruthSet(np.array([[0.3, 0.35, 0.3, 0.15, 0.4], [0.65, 0.6, 0.35, 0.2, -1.0]]), [0, 1])
    return model.parameters(), lambda: set_loss(model(image, mode="train").detections, gts)[0]


CHECKS: dict[str, Builder] = {
    "add": _binary(T.add, _normal(3, 4), _normal(4)),
    "sub": _binary(T.sub, _normal(3, 1), _normal(3, 4)),
    "mul": _binary(T.mul, _normal(3, 4), _normal(3, 4)),
    "div": _binary(T.div, _normal(3, 4), _positive(3, 4)),
    "neg": _unary(T.neg, _normal(3, 4)),
    "exp": _unary(T.exp, _normal(3, 4)),
    "log": _unary(T.log, _positive(3, 4)),
    "sqrt": _unary(T.sqrt, _positive(3, 4)),
    "square": _unary(T.square, _normal(3, 4)),
    "sin": _unary(T.sin, _normal(3, 4)),
    "cos": _unary(T.cos, _normal(3, 4)),
    "sigmoid": _unary(T.sigmoid, _normal(3, 4)),
    "tanh": _unary(T.tanh, _normal(3, 4)),
    "relu": _unary(T.relu, lambda rng: _away_from_zero(rng, (3, 4))),
    "absolute": _unary(T.absolute, lambda rng: _away_from_zero(rng, (3, 4))),
    "minimum": _check_minmax(T.minimum),
    "maximum": _check_minmax(T.maximum),
    "reductions": _check_reductions,
    "reshape_transpose": _check_reshape_transpose,
    "index": _check_index,
    "concat_stack": _check_concat_stack,
    "matmul": _binary(T.matmul, _normal(3, 4), _normal(4, 2)),
    "linear": _check_linear,
    "softmax": _unary(lambda x: T.softmax(x, axis=-1), _normal(3, 5)),
    "log_softmax": _unary(lambda x: T.log_softmax(x, axis=-1), _normal(3, 5)),
    "layer_norm": _check_layer_norm,
    "dropout": _check_dropout,
    "conv2d": _check_conv(1, 1),
    "conv2d_strided": _check_conv(2, 1),
    "depthwise_conv2d": _check_depthwise,
    "pointwise_conv2d": _check_pointwise,
    "dsconv": _check_dsconv,
    "bilinear_resize": _check_resize,
    "sample_points": _check_sample_points,
    "rotated_iou": _check_rotated_iou,
    "rotated_roi_align": _check_roi_align,
    "dsconv_encoder_layer": _check_dsconv_layer,
    "fuse_adjacent_levels": _check_fuse,
    "attention_encoder_layer": _check_attention_layer,
    "squash_box": _check_squash,
    "spatial_bias": _check_spatial_bias,
    "ms_cross_attention": _check_cross_attention,
    "decode_residual": _check_decode_residual,
    "set_loss": _check_set_loss,
    "end_to_end": _check_end_to_end,
}


def _on_tape(f: Callable[[], Tensor], seed: int = 0) -> Callable[[], Tensor]:
    """Evaluate ``f`` on a fresh tape so stochastic ops replay the same masks."""
    def g():
        with T.Tape(seed=seed):
            return f()
    return g


def analytic_grads(inputs: list[Tensor], f: Callable[[], Tensor]) -> list[np.ndarray]:
    T.zero_grad(inputs)
    loss = _on_tape(f)()
    T.backward(loss)
    grads = [x.grad if x.grad is not None else np.zeros_like(x.data) for x in inputs]
    T.zero_grad(inputs)
    return grads


def run_check(name: str, seed: int = 0, eps: float = 1e-6, tol: float = 1e-4,
              corrupt: bool = False, scale_floor: float = 1e-2) -> CheckResult:
    """Compare analytic and central-difference gradients for one named check.

    The error is norm-wise per input tensor. Its denominator is at least
    ``scale_floor`` times the norm of the check's whole numeric gradient, so
    an input whose exact gradient is zero (a key bias under softmax) is
    judged against the check's scale rather than against rounding noise.

    ``corrupt`` perturbs the analytic gradient; it exists so callers can
    confirm a wrong gradient is reported as a failure.
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    inputs, f = CHECKS[name](rng)
    grads = analytic_grads(inputs, f)
    if corrupt:
        grads = [g * 1.01 + 1e-3 for g in grads]
    numeric = [T.finite_diff_grad(_on_tape(f), x, eps) for x in inputs]
    total = math.sqrt(sum(float(np.sum(n * n)) for n in numeric))
    floor = max(scale_floor * total, 1e-8)
    err = max(T.relative_error(g, n, floor) for g, n in zip(grads, numeric))
    return CheckResult(name, err, err <= tol, time.perf_counter() - t0, len(inputs))


def run_suite(names: Optional[list[str]] = None, seed: int = 0, eps: float = 1e-6, tol: float = 1e-4,
              corrupt: Optional[str] = None) -> list[CheckResult]:
    names = list(CHECKS) if not names else names
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise KeyError(f"unknown gradient checks: {unknown}")
    return [run_check(n, seed, eps, tol, corrupt == n) for n in names]
