"""Rotated-rectangle geometry: polygons, exact IoU, Monte-Carlo IoU and rotated ROIAlign.

Boxes are ``(cx, cy, w, h, alpha)`` in normalized image coordinates, with
``alpha`` the angle (radians) from the x-axis to the ``w`` edge, reduced to
``[-pi/2, pi/2)``. A box's corner ``(su, sv)`` with ``su, sv in {-1, +1}``
sits at ``c + R(alpha) @ (su*w/2, sv*h/2)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .pyramid import FeaturePyramid
from .tensor import Tensor, as_tensor, custom_op, reshape, sample_points

HALF_PI = 0.5 * math.pi
_CORNER_SIGNS = ((-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0))


def normalize_angle(alpha: float) -> float:
    """Reduce ``alpha`` modulo pi into ``[-pi/2, pi/2)``."""
    if -HALF_PI <= alpha < HALF_PI:
        return float(alpha)
    out = alpha - math.pi * math.floor((alpha + HALF_PI) / math.pi)
    # floor can land one period off when alpha + pi/2 rounds onto a multiple of pi
    if out >= HALF_PI:
        out -= math.pi
    elif out < -HALF_PI:
        out += math.pi
    return float(out)


def angle_wrap_count(alpha: np.ndarray) -> np.ndarray:
    """Integer k such that ``alpha - k*pi`` is the normalized angle (elementwise)."""
    alpha = np.asarray(alpha, dtype=np.float64)
    k = np.floor((alpha + HALF_PI) / math.pi)
    out = alpha - math.pi * k
    k = np.where(out >= HALF_PI, k + 1, k)
    k = np.where(out < -HALF_PI, k - 1, k)
    return np.where((alpha >= -HALF_PI) & (alpha < HALF_PI), 0.0, k)


@dataclass(frozen=True)
class RotatedBox:
    cx: float
    cy: float
    w: float
    h: float
    alpha: float = 0.0

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box extents must be positive, got w={self.w}, h={self.h}")
        object.__setattr__(self, "alpha", normalize_angle(self.alpha))

    @classmethod
    def from_array(cls, arr: Sequence[float]) -> "RotatedBox":
        cx, cy, w, h, a = (float(v) for v in arr)
        return cls(cx, cy, w, h, a)

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h, self.alpha])

    @property
    def area(self) -> float:
        return self.w * self.h


class ConvexPolygon:
    """Counter-clockwise (positive shoelace) vertex loop; may be empty."""

    __slots__ = ("vertices",)

    def __init__(self, vertices):
        self.vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 2)

    def __len__(self) -> int:
        return len(self.vertices)

    @property
    def area(self) -> float:
        return _shoelace([tuple(v) for v in self.vertices])

    @property
    def is_empty(self) -> bool:
        return len(self.vertices) < 3 or self.area <= 0.0


def _box_tuple(box) -> tuple:
    if isinstance(box, RotatedBox):
        return (box.cx, box.cy, box.w, box.h, box.alpha)
    return tuple(float(v) for v in box)


def _corners(cx, cy, w, h, c, s) -> list:
    hw, hh = w * 0.5, h * 0.5
    pts = []
    for su, sv in _CORNER_SIGNS:
        u, v = hw * su, hh * sv
        pts.append((cx + u * c - v * s, cy + u * s + v * c))
    return pts


def to_polygon(box) -> ConvexPolygon:
    cx, cy, w, h, a = _box_tuple(box)
    return ConvexPolygon(_corners(cx, cy, w, h, math.cos(a), math.sin(a)))


def _shoelace(pts) -> float:
    n = len(pts)
    if n < 3:
        return 0.0 * pts[0][0] if n else 0.0
    acc = 0.0
    for i in range(n):
        x0, y0 = pts[i]
        x1, y1 = pts[(i + 1) % n]
        acc = acc + (x0 * y1 - x1 * y0)
    return acc * 0.5


def _clip(subject: list, clip: list) -> list:
    """Sutherland-Hodgman clipping of a convex loop by a convex CCW loop.

    Works on any scalar type supporting arithmetic and ``float()``, so the
    same code runs on plain floats and on dual numbers.
    """
    out = subject
    n = len(clip)
    for i in range(n):
        if not out:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        inp = out
        out = []
        m = len(inp)
        side = [ex * (py - ay) - ey * (px - ax) for px, py in inp]
        for j in range(m):
            p, q = inp[j], inp[(j + 1) % m]
            sp, sq = side[j], side[(j + 1) % m]
            fp, fq = float(sp), float(sq)
            if fp >= 0.0:
                out.append(p)
            if (fp >= 0.0) != (fq >= 0.0):
                t = sp / (sp - sq)
                out.append((p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])))
    return out if len(out) >= 3 else []


def clip_polygons(subject: ConvexPolygon, clip: ConvexPolygon) -> ConvexPolygon:
    """Intersection of two convex CCW polygons (empty when they do not overlap)."""
    if len(subject) < 3 or len(clip) < 3:
        return ConvexPolygon(np.zeros((0, 2)))
    pts = _clip([tuple(v) for v in subject.vertices], [tuple(v) for v in clip.vertices])
    if not pts or _shoelace(pts) <= 0.0:
        return ConvexPolygon(np.zeros((0, 2)))
    return ConvexPolygon(pts)


def _aabb_disjoint(a: tuple, b: tuple) -> bool:
    def half(box):
        c, s = abs(math.cos(box[4])), abs(math.sin(box[4]))
        return 0.5 * (box[2] * c + box[3] * s), 0.5 * (box[2] * s + box[3] * c)

    ax, ay = half(a)
    bx, by = half(b)
    return abs(a[0] - b[0]) >= ax + bx or abs(a[1] - b[1]) >= ay + by


def rotated_iou(a, b) -> float:
    """Exact IoU of two rotated boxes via convex clipping."""
    a, b = _box_tuple(a), _box_tuple(b)
    if a == b:
        return 1.0
    if _aabb_disjoint(a, b):
        return 0.0
    pa = _corners(a[0], a[1], a[2], a[3], math.cos(a[4]), math.sin(a[4]))
    pb = _corners(b[0], b[1], b[2], b[3], math.cos(b[4]), math.sin(b[4]))
    pts = _clip(pa, pb)
    inter = max(_shoelace(pts), 0.0) if pts else 0.0
    if inter <= 0.0:
        return 0.0
    union = a[2] * a[3] + b[2] * b[3] - inter
    return min(max(inter / union, 0.0), 1.0)


def pairwise_iou(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    boxes_a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 5)
    boxes_b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 5)
    out = np.zeros((len(boxes_a), len(boxes_b)))
    bl = [tuple(b) for b in boxes_b.tolist()]
    for i, a in enumerate(boxes_a.tolist()):
        a = tuple(a)
        for j, b in enumerate(bl):
            out[i, j] = rotated_iou(a, b)
    return out


# ---------------------------------------------------------------------------
# Forward-mode duals for the IoU gradient


class _Dual:
    """Scalar value with a tangent vector over the 10 box parameters."""

    __slots__ = ("v", "d")

    def __init__(self, v: float, d: np.ndarray):
        self.v = v
        self.d = d

    def __float__(self):
        return self.v

    def __add__(self, o):
        if isinstance(o, _Dual):
            return _Dual(self.v + o.v, self.d + o.d)
        return _Dual(self.v + o, self.d)

    __radd__ = __add__

    def __sub__(self, o):
        if isinstance(o, _Dual):
            return _Dual(self.v - o.v, self.d - o.d)
        return _Dual(self.v - o, self.d)

    def __rsub__(self, o):
        return _Dual(o - self.v, -self.d)

    def __mul__(self, o):
        if isinstance(o, _Dual):
            return _Dual(self.v * o.v, self.d * o.v + o.d * self.v)
        return _Dual(self.v * o, self.d * o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        if isinstance(o, _Dual):
            q = self.v / o.v
            return _Dual(q, (self.d - o.d * q) / o.v)
        return _Dual(self.v / o, self.d / o)

    def __neg__(self):
        return _Dual(-self.v, -self.d)


def _dual_box(box: tuple, offset: int) -> list:
    params = []
    for k, v in enumerate(box):
        d = np.zeros(10)
        d[offset + k] = 1.0
        params.append(_Dual(v, d))
    return params


def _dual_corners(p: list) -> list:
    cx, cy, w, h, a = p
    c = _Dual(math.cos(a.v), -math.sin(a.v) * a.d)
    s = _Dual(math.sin(a.v), math.cos(a.v) * a.d)
    return _corners(cx, cy, w, h, c, s)


def rotated_iou_with_grad(a, b) -> tuple[float, np.ndarray, np.ndarray]:
    """IoU together with its gradient with respect to both boxes' 5 parameters.

    The gradient is the exact derivative of the piecewise-smooth clipping
    construction (zero when the boxes do not overlap).
    """
    a, b = _box_tuple(a), _box_tuple(b)
    if _aabb_disjoint(a, b):
        return 0.0, np.zeros(5), np.zeros(5)
    pa, pb = _dual_box(a, 0), _dual_box(b, 5)
    pts = _clip(_dual_corners(pa), _dual_corners(pb))
    if not pts:
        return 0.0, np.zeros(5), np.zeros(5)
    inter = _shoelace(pts)
    if inter.v <= 0.0:
        return 0.0, np.zeros(5), np.zeros(5)
    union = pa[2] * pa[3] + pb[2] * pb[3] - inter
    iou = inter / union
    return iou.v, iou.d[:5].copy(), iou.d[5:].copy()


def rotated_iou_op(pred, target) -> Tensor:
    """Differentiable row-wise IoU between ``[n,5]`` box tensors."""
    pred, target = as_tensor(pred), as_tensor(target)
    P = pred.data.reshape(-1, 5)
    T = target.data.reshape(-1, 5)
    n = len(P)
    vals = np.zeros(n)
    ga, gb = np.zeros((n, 5)), np.zeros((n, 5))
    for i in range(n):
        vals[i], ga[i], gb[i] = rotated_iou_with_grad(tuple(P[i]), tuple(T[i]))
    pshape, tshape = pred.shape, target.shape
    return custom_op(vals, (pred, target),
                     lambda g: ((g[:, None] * ga).reshape(pshape), (g[:, None] * gb).reshape(tshape)))


# ---------------------------------------------------------------------------
# Monte-Carlo oracle


def points_in_box(box, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    cx, cy, w, h, a = _box_tuple(box)
    dx, dy = x - cx, y - cy
    c, s = math.cos(a), math.sin(a)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return (np.abs(u) <= 0.5 * w) & (np.abs(v) <= 0.5 * h)


def monte_carlo_iou(a, b, n_samples: int = 1_000_000, seed: int = 0) -> float:
    """Estimate IoU by uniform sampling over the union's bounding rectangle."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    corners = np.vstack([to_polygon(a).vertices, to_polygon(b).vertices])
    lo, hi = corners.min(axis=0), corners.max(axis=0)
    rng = np.random.default_rng(seed)
    inter = union = 0
    remaining = n_samples
    while remaining > 0:
        m = min(remaining, 1 << 18)
        pts = rng.uniform(lo, hi, size=(m, 2))
        ia = points_in_box(a, pts[:, 0], pts[:, 1])
        ib = points_in_box(b, pts[:, 0], pts[:, 1])
        inter += int(np.count_nonzero(ia & ib))
        union += int(np.count_nonzero(ia | ib))
        remaining -= m
    return inter / union if union else 0.0


# ---------------------------------------------------------------------------
# Rotated ROIAlign


def roi_level(box, pyramid: FeaturePyramid, canonical_cells: float = 8.0) -> int:
    """Pyramid level for a box: one level coarser per doubling of its scale.

    A box whose side (geometric mean) spans ``canonical_cells`` cells of the
    finest level lands on level 0 until it doubles.
    """
    _, _, w, h, _ = _box_tuple(box)
    side_px = math.sqrt(w * h) * pyramid.image_size
    k = math.floor(math.log2(side_px / (canonical_cells * pyramid.ratios[0])))
    return min(max(k, 0), len(pyramid) - 1)


def roi_sample_grid(box, out_size: int, height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Pixel coordinates of bin centres laid out in the box's rotated frame.

    Row ``i`` runs along the ``h`` edge, column ``j`` along the ``w`` edge.
    """
    cx, cy, w, h, a = _box_tuple(box)
    t = (np.arange(out_size) + 0.5) / out_size - 0.5
    u = np.broadcast_to(t[None, :] * w, (out_size, out_size))
    v = np.broadcast_to(t[:, None] * h, (out_size, out_size))
    c, s = math.cos(a), math.sin(a)
    x = cx + u * c - v * s
    y = cy + u * s + v * c
    return x * width - 0.5, y * height - 0.5


def rotated_roi_align(pyramid: FeaturePyramid, box, out_size: int = 7,
                      level: int | None = None, canonical_cells: float = 8.0) -> tuple[Tensor, float]:
    """Pool a ``[P,P,C]`` patch for a rotated box from one pyramid level.

    One bilinear sample per bin centre; outside the map reads zeros. Returns
    the patch and the fraction of bin centres lying inside the map.
    """
    if out_size < 1:
        raise ValueError("out_size must be >= 1")
    if level is None:
        level = roi_level(box, pyramid, canonical_cells)
    fmap = pyramid.levels[level]
    H, W, C = fmap.shape
    px, py = roi_sample_grid(box, out_size, H, W)
    samples, inside = sample_points(fmap, px, py)
    return reshape(samples, (out_size, out_size, C)), float(inside.mean())
