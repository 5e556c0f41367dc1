"""Angle-aware object queries, multi-scale cross-attention and the 5-DoF detection head."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import attention_weights, flatten_pyramid, pyramid_positions, token_locations
from .errors import DimensionError
from .geometry import RotatedBox
from .nn import MLP, LayerNorm, Linear, Module, Parameter
from .pyramid import FeaturePyramid
from .tensor import Tensor

# maps sigmoid outputs in (0,1)^5 onto (cx, cy, w, h, alpha)
_BOX_SCALE = np.array([1.0, 1.0, 1.0, 1.0, math.pi])
_BOX_SHIFT = np.array([0.0, 0.0, 0.0, 0.0, -0.5 * math.pi])


def squash_box(logits) -> Tensor:
    """Sigmoid each of the 5 box logits; the angle lands in (-pi/2, pi/2)."""
    return T.add(T.mul(T.sigmoid(logits), _BOX_SCALE), _BOX_SHIFT)


@dataclass
class QuerySet:
    embeddings: Tensor      # [N, C]
    ref_logits: Tensor      # [N, 5] pre-sigmoid reference
    reference_points: Tensor  # [N, 5] (cx, cy, w, h, alpha)

    def __len__(self) -> int:
        return self.embeddings.shape[0]


@dataclass
class DetectionSet:
    boxes: Tensor   # [N, 5]
    logits: Tensor  # [N, num_classes + 1], last column is no-object

    def __len__(self) -> int:
        return self.boxes.shape[0]

    @property
    def num_classes(self) -> int:
        return self.logits.shape[1] - 1

    def box_array(self) -> np.ndarray:
        return self.boxes.data.copy()

    def rotated_boxes(self) -> list[RotatedBox]:
        return [RotatedBox.from_array(b) for b in self.boxes.data]

    def probabilities(self) -> np.ndarray:
        z = self.logits.data - self.logits.data.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def detach(self) -> "DetectionSet":
        return DetectionSet(T.Tensor(self.boxes.data), T.Tensor(self.logits.data))


def predict_reference_points(embeddings, proj: Linear) -> QuerySet:
    """Linear map of each query embedding to a squashed reference box."""
    embeddings = T.as_tensor(embeddings)
    logits = proj(embeddings)
    return QuerySet(embeddings, logits, squash_box(logits))


# ---------------------------------------------------------------------------
# Attention blocks


class CrossAttentionLayer(Module):
    def __init__(self, rng: np.random.Generator, channels: int, ffn_dim: int):
        self.q = Linear(rng, channels, channels)
        self.k = Linear(rng, channels, channels)
        self.v = Linear(rng, channels, channels)
        self.out = Linear(rng, channels, channels)
        self.norm1 = LayerNorm(channels)
        self.ffn = MLP(rng, [channels, ffn_dim, channels])
        self.norm2 = LayerNorm(channels)


class SelfAttentionLayer(Module):
    def __init__(self, rng: np.random.Generator, channels: int):
        self.q = Linear(rng, channels, channels)
        self.k = Linear(rng, channels, channels)
        self.v = Linear(rng, channels, channels)
        self.out = Linear(rng, channels, channels)
        self.norm = LayerNorm(channels)


def spatial_bias(refs: Tensor, locations: np.ndarray) -> Tensor:
    """``-|loc_k - c_q|^2 / (2 sigma_q^2)`` with ``sigma_q^2 = (w_q^2 + h_q^2) / 8``."""
    centres = T.reshape(refs[:, 0:2], (-1, 1, 2))
    d2 = T.tsum(T.square(T.sub(centres, locations[None, :, :])), axis=-1)
    w, h = refs[:, 2:3], refs[:, 3:4]
    two_sigma2 = T.mul(T.add(T.square(w), T.square(h)), 0.25)
    return T.neg(T.div(d2, two_sigma2))


def ms_cross_attention(tgt, queries: QuerySet, memory: FeaturePyramid, layer: CrossAttentionLayer,
                       memory_tokens: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Queries attend over the tokens of every memory level at once.

    Attention logits are scaled query/key products plus a Gaussian bias
    centred on each query's reference box. Returns the updated query
    features (post-norm residual + feed-forward) and the ``[N, T]`` weights.
    """
    tgt = T.as_tensor(tgt)
    if memory.channels != tgt.shape[1]:
        raise DimensionError(f"memory has {memory.channels} channels, queries have {tgt.shape[1]}")
    x = flatten_pyramid(memory) if memory_tokens is None else memory_tokens
    xp = T.add(x, pyramid_positions(memory))
    locs = token_locations(memory.shapes)
    q = layer.q(tgt)
    k = layer.k(xp)
    v = layer.v(xp)
    a = attention_weights(q, k, spatial_bias(queries.reference_points, locs))
    y = layer.norm1(T.add(tgt, layer.out(T.matmul(a, v))))
    y = layer.norm2(T.add(y, layer.ffn(y)))
    return y, a


def query_self_attention(tgt, layer: SelfAttentionLayer) -> Tensor:
    tgt = T.as_tensor(tgt)
    a = attention_weights(layer.q(tgt), layer.k(tgt))
    return layer.norm(T.add(tgt, layer.out(T.matmul(a, layer.v(tgt)))))


# ---------------------------------------------------------------------------
# Head


class DetectionHead(Module):
    def __init__(self, rng: np.random.Generator, channels: int, num_classes: int):
        self.box_mlp = MLP(rng, [channels, channels, channels, 5])
        # small last layer so untrained boxes start near their references
        self.box_mlp.layers[-1].weight.data *= 0.1
        self.cls = Linear(rng, channels, num_classes + 1)


def detection_head(features, queries: QuerySet, head: DetectionHead) -> DetectionSet:
    """Boxes ``sigmoid(MLP(D) + ref_logits)``; class logits ``FC(D)``.

    Adding the reference logits before the sigmoid decodes the MLP output as
    a delta on the reference box, so a zero MLP reproduces the references.
    """
    features = T.as_tensor(features)
    deltas = head.box_mlp(features)
    boxes = squash_box(T.add(deltas, queries.ref_logits))
    return DetectionSet(boxes, head.cls(features))


# ---------------------------------------------------------------------------
# Decoder stack


class Decoder(Module):
    def __init__(self, rng: np.random.Generator, channels: int, num_queries: int, num_layers: int,
                 num_classes: int, ffn_dim: int | None = None):
        if num_layers < 1:
            raise ValueError("decoder needs at least one layer")
        ffn_dim = ffn_dim or 2 * channels
        self.query_embed = Parameter(rng.normal(0.0, 1.0, size=(num_queries, channels)))
        self.ref_proj = Linear(rng, channels, 5)
        spread = np.array([1.5, 1.5, 0.3, 0.3, 1.0]) / math.sqrt(channels)
        self.ref_proj.weight.data = rng.normal(0.0, 1.0, size=(channels, 5)) * spread
        self.ref_proj.bias.data = np.array([0.0, 0.0, -1.1, -1.1, 0.0])
        self.cross = [CrossAttentionLayer(rng, channels, ffn_dim) for _ in range(num_layers)]
        self.self_attn = [SelfAttentionLayer(rng, channels) for _ in range(num_layers - 1)]
        self.head = DetectionHead(rng, channels, num_classes)

    @property
    def num_layers(self) -> int:
        return len(self.cross)

    def queries(self) -> QuerySet:
        return predict_reference_points(self.query_embed, self.ref_proj)

    def __call__(self, memory: FeaturePyramid, aux: bool = True) -> list[DetectionSet]:
        return decoder_stack(self.queries(), memory, self, aux=aux)


def decoder_stack(queries: QuerySet, memory: FeaturePyramid, dec: Decoder,
                  num_layers: int | None = None, aux: bool = True) -> list[DetectionSet]:
    """Cross-attention layers (self-attention between them), head after each.

    With ``aux`` every layer's detections are returned, else only the last.
    """
    n = dec.num_layers if num_layers is None else num_layers
    if not 1 <= n <= dec.num_layers:
        raise ValueError(f"num_layers must lie in [1, {dec.num_layers}]")
    tokens = flatten_pyramid(memory)
    tgt = queries.embeddings
    outs = []
    for i in range(n):
        if i > 0:
            tgt = query_self_attention(tgt, dec.self_attn[i - 1])
        tgt, _ = ms_cross_attention(tgt, queries, memory, dec.cross[i], memory_tokens=tokens)
        if aux or i == n - 1:
            outs.append(detection_head(tgt, queries, dec.head))
    return outs
