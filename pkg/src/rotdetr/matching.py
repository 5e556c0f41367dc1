"""Bipartite matching of predictions to rotated ground truths, and the set loss."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import tensor as T
from .decoder import DetectionSet
from .errors import ContractError
from .geometry import pairwise_iou, rotated_iou, rotated_iou_op
from .tensor import Tensor


class LossCoefficients(NamedTuple):
    cls: float = 2.0
    l1: float = 5.0
    iou: float = 2.0


@dataclass
class GroundTruthSet:
    boxes: np.ndarray   # [M, 5]
    labels: np.ndarray  # [M] class indices

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 5)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.boxes) != len(self.labels):
            raise ValueError("one label per ground-truth box required")

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class MatchAssignment:
    pairs: list[tuple[int, int]]          # (query, gt), sorted by query
    unmatched: list[int] = field(default_factory=list)

    def total(self, cost: np.ndarray) -> float:
        return assignment_cost(cost, self.pairs)

    @property
    def queries(self) -> np.ndarray:
        return np.array([q for q, _ in self.pairs], dtype=np.int64)

    @property
    def gts(self) -> np.ndarray:
        return np.array([g for _, g in self.pairs], dtype=np.int64)


def assignment_cost(cost: np.ndarray, pairs: Sequence[tuple[int, int]]) -> float:
    total = 0.0
    for q, g in sorted(pairs):
        total += float(cost[q, g])
    return total


def _assignment(pairs, n_queries: int) -> MatchAssignment:
    pairs = sorted(pairs)
    used = {q for q, _ in pairs}
    return MatchAssignment(pairs, [q for q in range(n_queries) if q not in used])


# ---------------------------------------------------------------------------
# Costs


def angle_distance(a, b):
    """Period-pi distance ``min(|a-b|, pi-|a-b|)`` for angles already in [-pi/2, pi/2)."""
    d = np.abs(np.asarray(a) - np.asarray(b))
    return np.minimum(d, math.pi - d)


def box_l1(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """L1 over (cx, cy, w, h) plus the angle distance scaled by 1/pi (broadcasts)."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    return np.abs(pred[..., :4] - gt[..., :4]).sum(axis=-1) + angle_distance(pred[..., 4], gt[..., 4]) / math.pi


def pair_cost(pred_box, pred_probs, gt_box, gt_label: int, coeffs: LossCoefficients = LossCoefficients()) -> float:
    """Matching cost of one prediction against one ground truth."""
    cls_term = -float(np.asarray(pred_probs)[gt_label])
    l1_term = float(box_l1(pred_box, gt_box))
    iou_term = 1.0 - rotated_iou(pred_box, gt_box)
    return coeffs.cls * cls_term + coeffs.l1 * l1_term + coeffs.iou * iou_term


def cost_matrix(pred_boxes: np.ndarray, pred_probs: np.ndarray, gts: GroundTruthSet,
                coeffs: LossCoefficients = LossCoefficients()) -> np.ndarray:
    pred_boxes = np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 5)
    if len(gts) == 0:
        return np.zeros((len(pred_boxes), 0))
    cls_term = -np.asarray(pred_probs)[:, gts.labels]
    l1_term = box_l1(pred_boxes[:, None, :], gts.boxes[None, :, :])
    iou_term = 1.0 - pairwise_iou(pred_boxes, gts.boxes)
    return coeffs.cls * cls_term + coeffs.l1 * l1_term + coeffs.iou * iou_term


# ---------------------------------------------------------------------------
# Assignment solvers


def _hungarian_rows(cost: list[list[float]], n: int, m: int) -> list[int]:
    """Shortest-augmenting-path Hungarian for n <= m; returns column per row."""
    inf = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (m + 1)
    p = [0] * (m + 1)
    way = [0] * (m + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            row = cost[i0 - 1]
            ui = u[i0]
            delta = inf
            j1 = 0
            for j in range(1, m + 1):
                if not used[j]:
                    cur = row[j - 1] - ui - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    col_of = [-1] * n
    for j in range(1, m + 1):
        if p[j]:
            col_of[p[j] - 1] = j - 1
    return col_of


def hungarian_match(cost: np.ndarray) -> MatchAssignment:
    """Minimum-cost injective assignment on a rectangular ``[N, M]`` matrix.

    Pairs number ``min(N, M)``; the rest of the queries stay unmatched.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be a matrix")
    N, M = cost.shape
    if N == 0 or M == 0:
        return _assignment([], N)
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix must be finite")
    if N <= M:
        cols = _hungarian_rows(cost.tolist(), N, M)
        pairs = [(q, g) for q, g in enumerate(cols)]
    else:
        rows = _hungarian_rows(cost.T.tolist(), M, N)
        pairs = [(q, g) for g, q in enumerate(rows)]
    return _assignment(pairs, N)


def brute_force_match(cost: np.ndarray, cap: int = 8) -> MatchAssignment:
    """Exhaustive search over all injections; ties go to the lexicographically smallest pair list."""
    cost = np.asarray(cost, dtype=np.float64)
    N, M = cost.shape
    if min(N, M) > cap:
        raise ContractError(f"brute force is capped at min(N, M) <= {cap}, got {min(N, M)}")
    if N == 0 or M == 0:
        return _assignment([], N)
    best, best_pairs = math.inf, None
    if N <= M:
        candidates = ([(q, g) for q, g in enumerate(perm)] for perm in itertools.permutations(range(M), N))
    else:
        candidates = (sorted((q, g) for g, q in enumerate(perm)) for perm in itertools.permutations(range(N), M))
    for pairs in candidates:
        total = assignment_cost(cost, pairs)
        if total < best or (total == best and pairs < best_pairs):
            best, best_pairs = total, pairs
    return _assignment(best_pairs, N)


# ---------------------------------------------------------------------------
# Loss


@dataclass
class LossBreakdown:
    total: float
    per_layer: list[dict]
    assignments: list[MatchAssignment]


def _layer_loss(pred: DetectionSet, gts: GroundTruthSet, coeffs: LossCoefficients,
                no_object_weight: float) -> tuple[Tensor, dict, MatchAssignment]:
    N, K1 = pred.logits.shape
    no_object = K1 - 1
    cost = cost_matrix(pred.boxes.data, pred.probabilities(), gts, coeffs)
    match = hungarian_match(cost)
    targets = np.full(N, no_object, dtype=np.int64)
    weights = np.full(N, no_object_weight)
    qi, gi = match.queries, match.gts
    targets[qi] = gts.labels[gi]
    weights[qi] = 1.0
    logp = T.log_softmax(pred.logits, axis=-1)
    picked = logp[np.arange(N), targets]
    ce = T.neg(T.div(T.tsum(T.mul(picked, weights)), float(weights.sum())))
    norm = float(max(len(gts), 1))
    terms = {"cls": ce}
    if len(qi):
        mp = pred.boxes[qi]
        mg = gts.boxes[gi]
        lin = T.tsum(T.absolute(T.sub(mp[:, :4], mg[:, :4])))
        d = T.absolute(T.sub(mp[:, 4], mg[:, 4]))
        ang = T.tsum(T.minimum(d, T.sub(math.pi, d)))
        terms["l1"] = T.div(T.add(lin, T.mul(ang, 1.0 / math.pi)), norm)
        terms["iou"] = T.div(T.tsum(T.sub(1.0, rotated_iou_op(mp, mg))), norm)
    loss = T.mul(ce, coeffs.cls)
    if "l1" in terms:
        loss = T.add(loss, T.add(T.mul(terms["l1"], coeffs.l1), T.mul(terms["iou"], coeffs.iou)))
    info = {k: v.item() for k, v in terms.items()}
    return loss, info, match


def set_loss(preds, gts: GroundTruthSet, coeffs: LossCoefficients = LossCoefficients(),
             no_object_weight: float = 0.1) -> tuple[Tensor, LossBreakdown]:
    """Hungarian-matched set loss summed over decoder layers.

    Per layer: weighted cross-entropy over all queries (unmatched queries
    target no-object with ``no_object_weight``), plus L1 and ``1 - IoU`` over
    matched pairs divided by the ground-truth count. Matching is fixed
    during differentiation.
    """
    if isinstance(preds, DetectionSet):
        preds = [preds]
    total = None
    layers, matches = [], []
    for pred in preds:
        loss, info, match = _layer_loss(pred, gts, coeffs, no_object_weight)
        total = loss if total is None else T.add(total, loss)
        layers.append(info)
        matches.append(match)
    return total, LossBreakdown(total.item(), layers, matches)
