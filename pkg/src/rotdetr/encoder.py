"""Feature pyramid construction and the two interchangeable encoder blocks.

The depthwise-separable block filters every level locally and then mixes
adjacent levels; the attention block is the global self-attention baseline
over all pyramid tokens.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from . import tensor as T
from .errors import ConfigurationError
from .nn import LayerNorm, Module, Parameter, glorot, zeros
from .pyramid import FeaturePyramid
from .tensor import Tensor

ENCODER_KINDS = ("dsconv", "attention")


@dataclass
class EncoderConfig:
    kind: str = "dsconv"
    num_layers: int = 2
    kernel: int = 3
    dropout_rate: float = 0.1
    channels: int = 32
    max_tokens: int = 4096

    def validate(self) -> None:
        if self.kind not in ENCODER_KINDS:
            raise ConfigurationError(f"encoder kind must be one of {ENCODER_KINDS}, got {self.kind!r}")
        if self.num_layers < 1:
            raise ConfigurationError("encoder needs at least one layer")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigurationError(f"encoder kernel must be odd, got {self.kernel}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError("dropout_rate must lie in [0, 1)")
        if self.channels < 4 or self.channels % 4:
            raise ConfigurationError("channels must be a positive multiple of 4")


# ---------------------------------------------------------------------------
# Stem and pyramid


class Stem(Module):
    """Stride-2 3x3 conv + ReLU stages bringing an RGB image down to ``ratio``."""

    def __init__(self, rng: np.random.Generator, ratio: int, channels: int, in_channels: int = 3):
        n = int(round(math.log2(ratio)))
        if 2 ** n != ratio:
            raise ConfigurationError(f"stem ratio must be a power of two, got {ratio}")
        self.ratio = ratio
        widths = [in_channels] + [min(channels, 16 * 2 ** i) for i in range(n)]
        self.weights = [glorot(rng, 9 * widths[i], widths[i + 1], shape=(3, 3, widths[i], widths[i + 1]), gain=math.sqrt(2))
                        for i in range(n)]
        self.biases = [zeros(widths[i + 1]) for i in range(n)]
        self.out_channels = widths[-1]

    def __call__(self, image) -> Tensor:
        x = T.as_tensor(image)
        for w, b in zip(self.weights, self.biases):
            x = T.relu(T.add(T.conv2d(x, w, stride=2, padding=1), b))
        return x


def build_pyramid(stem_features, ratios: list[int], stem_ratio: int,
                  lateral: list[tuple], top: Optional[tuple] = None) -> FeaturePyramid:
    """Project stem features into a ``len(ratios)``-level pyramid.

    Every level but the coarsest is a strided 1x1 convolution of the stem
    (``lateral[l] = (weight [1,1,C_stem,C], bias [C])``). With two or more
    levels the coarsest is a 3x3 stride-2 convolution of the level below it
    (``top = (weight [3,3,C,C], bias [C])``).
    """
    stem_features = T.as_tensor(stem_features)
    ratios = sorted(int(r) for r in ratios)
    L = len(ratios)
    if L < 1:
        raise ConfigurationError("pyramid needs at least one level")
    H, W, _ = stem_features.shape
    image = H * stem_ratio
    for r in ratios:
        if r % stem_ratio or image % r or (W * stem_ratio) % r:
            raise ConfigurationError(f"extent {H}x{W} at ratio {stem_ratio} is not divisible down to ratio {r}")
    n_lateral = L if L == 1 else L - 1
    if len(lateral) != n_lateral:
        raise ConfigurationError(f"expected {n_lateral} lateral projections, got {len(lateral)}")
    levels = []
    for r, (w, b) in zip(ratios[:n_lateral], lateral):
        levels.append(T.add(T.conv2d(stem_features, w, stride=r // stem_ratio), b))
    if L > 1:
        if top is None:
            raise ConfigurationError("coarsest level needs a 3x3 projection")
        if ratios[-1] != 2 * ratios[-2]:
            raise ConfigurationError("coarsest ratio must be twice the next finer ratio")
        w, b = top
        levels.append(T.add(T.conv2d(levels[-1], w, stride=2, padding=1), b))
    return FeaturePyramid(levels, ratios)


class PyramidNeck(Module):
    def __init__(self, rng: np.random.Generator, ratios: list[int], stem_ratio: int, stem_channels: int, channels: int):
        self.ratios = sorted(ratios)
        self.stem_ratio = stem_ratio
        n_lateral = 1 if len(ratios) == 1 else len(ratios) - 1
        self.lateral_w = [glorot(rng, stem_channels, channels, shape=(1, 1, stem_channels, channels)) for _ in range(n_lateral)]
        self.lateral_b = [zeros(channels) for _ in range(n_lateral)]
        if len(ratios) > 1:
            self.top_w = glorot(rng, 9 * channels, channels, shape=(3, 3, channels, channels))
            self.top_b = zeros(channels)

    def __call__(self, stem_features) -> FeaturePyramid:
        top = (self.top_w, self.top_b) if len(self.ratios) > 1 else None
        return build_pyramid(stem_features, self.ratios, self.stem_ratio,
                             list(zip(self.lateral_w, self.lateral_b)), top)


# ---------------------------------------------------------------------------
# Depthwise-separable block


class DSConvLayer(Module):
    """Weights shared by every pyramid level."""

    def __init__(self, rng: np.random.Generator, channels: int, kernel: int):
        self.w_depth = Parameter(rng.normal(0.0, 1.0 / kernel, size=(kernel, kernel, channels)))
        self.w_point = glorot(rng, channels, channels)
        self.b_point = zeros(channels)
        self.norm = LayerNorm(channels)


def dsconv_encoder_layer(pyr: FeaturePyramid, layer: DSConvLayer) -> FeaturePyramid:
    """Per level: ``LayerNorm(x + DSConv(x) + b)`` with extent-preserving padding."""
    k = layer.w_depth.shape[0]
    out = []
    for x in pyr.levels:
        y = T.add(T.dsconv(x, layer.w_depth, layer.w_point, stride=1, padding=k // 2), layer.b_point)
        out.append(layer.norm(T.add(x, y)))
    return FeaturePyramid(out, list(pyr.ratios))


def fuse_adjacent_levels(pyr: FeaturePyramid, rate: float, mode: str = "train",
                         seed: Optional[int] = None) -> FeaturePyramid:
    """Add the dropout-masked sum of both neighbouring levels to every level.

    Neighbours are bilinearly resampled to the receiving level's extent; a
    missing neighbour contributes nothing.
    """
    levels = pyr.levels
    out = []
    for l, x in enumerate(levels):
        H, W, _ = x.shape
        neigh = [T.bilinear_resize(levels[j], H, W) for j in (l - 1, l + 1) if 0 <= j < len(levels)]
        if not neigh:
            out.append(x)
            continue
        s = neigh[0] if len(neigh) == 1 else T.add(neigh[0], neigh[1])
        out.append(T.add(x, T.dropout(s, rate, mode, seed)))
    return FeaturePyramid(out, list(pyr.ratios))


# ---------------------------------------------------------------------------
# Self-attention baseline


def sine_position_encoding(height: int, width: int, channels: int) -> np.ndarray:
    """Fixed 2-D sinusoidal encoding ``[H*W, C]`` over normalized pixel centres."""
    if channels % 4:
        raise ConfigurationError("positional encoding needs channels divisible by 4")
    n = channels // 4
    ys = (np.arange(height) + 0.5) / height
    xs = (np.arange(width) + 0.5) / width
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    div = 10000.0 ** (np.arange(n) / n)
    parts = []
    for g in (gy.reshape(-1, 1), gx.reshape(-1, 1)):
        ang = 2.0 * math.pi * g / div
        parts += [np.sin(ang), np.cos(ang)]
    return np.concatenate(parts, axis=1)


def token_locations(shapes: list[tuple]) -> np.ndarray:
    """Normalized ``(x, y)`` centre of every token when levels are flattened in order."""
    locs = []
    for H, W, *_ in shapes:
        ys = (np.arange(H) + 0.5) / H
        xs = (np.arange(W) + 0.5) / W
        gy, gx = np.meshgrid(ys, xs, indexing="ij")
        locs.append(np.stack([gx.ravel(), gy.ravel()], axis=1))
    return np.concatenate(locs, axis=0)


def flatten_pyramid(pyr: FeaturePyramid) -> Tensor:
    return T.concat([T.reshape(x, (-1, x.shape[2])) for x in pyr.levels], axis=0)


def unflatten_tokens(tokens: Tensor, like: FeaturePyramid) -> FeaturePyramid:
    out, start = [], 0
    for H, W, C in like.shapes:
        out.append(T.reshape(tokens[start:start + H * W], (H, W, C)))
        start += H * W
    return FeaturePyramid(out, list(like.ratios))


def pyramid_positions(pyr: FeaturePyramid) -> np.ndarray:
    return np.concatenate([sine_position_encoding(H, W, C) for H, W, C in pyr.shapes], axis=0)


class AttentionLayer(Module):
    def __init__(self, rng: np.random.Generator, channels: int):
        self.w_q = glorot(rng, channels, channels)
        self.w_k = glorot(rng, channels, channels)
        self.w_v = glorot(rng, channels, channels)
        self.b_q = zeros(channels)
        self.b_k = zeros(channels)
        self.b_v = zeros(channels)
        self.norm = LayerNorm(channels)


def attention_weights(q: Tensor, k: Tensor, bias=None) -> Tensor:
    logits = T.mul(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(q.shape[-1]))
    if bias is not None:
        logits = T.add(logits, bias)
    return T.softmax(logits, axis=-1)


def attention_encoder_layer(pyr: FeaturePyramid, layer: AttentionLayer, level_embed: Tensor,
                            max_tokens: int = 4096) -> FeaturePyramid:
    """Global softmax attention over all tokens of all levels, then ``LayerNorm(x + A V)``.

    Queries and keys see the token content plus a fixed sinusoidal position
    and a learned scalar per level; values see content only.
    """
    total = sum(H * W for H, W, _ in pyr.shapes)
    if total > max_tokens:
        raise ConfigurationError(f"{total} tokens exceed the attention cap of {max_tokens}")
    x = flatten_pyramid(pyr)
    level_ids = np.concatenate([np.full(H * W, l) for l, (H, W, _) in enumerate(pyr.shapes)])
    lvl = T.reshape(level_embed[level_ids], (-1, 1))
    qk_in = T.add(T.add(x, pyramid_positions(pyr)), lvl)
    q = T.linear(qk_in, layer.w_q, layer.b_q)
    k = T.linear(qk_in, layer.w_k, layer.b_k)
    v = T.linear(x, layer.w_v, layer.b_v)
    a = attention_weights(q, k)
    y = layer.norm(T.add(x, T.matmul(a, v)))
    return unflatten_tokens(y, pyr)


# ---------------------------------------------------------------------------
# Encoder stack


class Encoder(Module):
    def __init__(self, rng: np.random.Generator, cfg: EncoderConfig, num_levels: int):
        cfg.validate()
        self.cfg = cfg
        if cfg.kind == "dsconv":
            self.layers = [DSConvLayer(rng, cfg.channels, cfg.kernel) for _ in range(cfg.num_layers)]
        else:
            self.layers = [AttentionLayer(rng, cfg.channels) for _ in range(cfg.num_layers)]
            self.level_embed = zeros(num_levels)

    def __call__(self, pyr: FeaturePyramid, mode: str = "eval") -> FeaturePyramid:
        for layer in self.layers:
            if self.cfg.kind == "dsconv":
                pyr = dsconv_encoder_layer(pyr, layer)
                pyr = fuse_adjacent_levels(pyr, self.cfg.dropout_rate, mode)
            else:
                pyr = attention_encoder_layer(pyr, layer, self.level_embed, self.cfg.max_tokens)
        return pyr


# ---------------------------------------------------------------------------
# Cost model


class OpCount(NamedTuple):
    multiply_adds: int
    parameters: int


def count_ops(kind: str, H: int, W: int, C: int, K: int = 3) -> OpCount:
    """Exact multiply-adds and parameters of one implemented encoder layer on an HxWxC map.

    dsconv: ``HW*K^2*C`` depthwise + ``HW*C^2`` pointwise.
    attention: ``3*HW*C^2`` projections + ``2*(HW)^2*C`` for scores and mixing.
    Parameters include biases and the LayerNorm affine pair.
    """
    if min(H, W, C, K) < 1:
        raise ValueError("count_ops arguments must be positive")
    hw = H * W
    if kind == "dsconv":
        return OpCount(hw * K * K * C + hw * C * C, K * K * C + C * C + C + 2 * C)
    if kind == "attention":
        return OpCount(3 * hw * C * C + 2 * hw * hw * C, 3 * C * C + 3 * C + 2 * C)
    raise ValueError(f"unknown encoder kind {kind!r}")


def asymptotic_cost(kind: str, H: int, W: int, C: int, K: int = 3) -> int:
    """Leading-order cost summed over all HW output points.

    Per point, attention costs ``HW*C^2`` and the separable convolution
    ``K^2*C + C^2``, where the kernel size is read as its area ``K^2``.
    """
    hw = H * W
    if kind == "attention":
        return hw * (hw * C * C)
    if kind == "dsconv":
        return hw * (K * K * C + C * C)
    raise ValueError(f"unknown encoder kind {kind!r}")
