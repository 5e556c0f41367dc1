"""Proposal recall at IoU thresholds, VOC-style AP, and matched-pair summaries."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .geometry import pairwise_iou
from .matching import GroundTruthSet, LossCoefficients, cost_matrix, hungarian_match


def _greedy_pairs(iou: np.ndarray) -> list[tuple[float, int, int]]:
    """All (iou, pred, gt) triples sorted by descending IoU, ties by index."""
    P, G = iou.shape
    order = sorted(((-iou[p, g], p, g) for p in range(P) for g in range(G)))
    return [(-v, p, g) for v, p, g in order]


def recalled_counts(pred_boxes: np.ndarray, gts: GroundTruthSet, thresholds) -> list[int]:
    """Ground truths recalled per threshold with greedy one-to-one matching by IoU."""
    pred_boxes = np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 5)
    if len(gts) == 0 or len(pred_boxes) == 0:
        return [0 for _ in thresholds]
    triples = _greedy_pairs(pairwise_iou(pred_boxes, gts.boxes))
    counts = []
    for t in thresholds:
        used_p, used_g = set(), set()
        for v, p, g in triples:
            if v < t:
                break
            if p not in used_p and g not in used_g:
                used_p.add(p)
                used_g.add(g)
        counts.append(len(used_g))
    return counts


def recall_at_iou(pred_boxes, gts: GroundTruthSet, thresholds) -> list[float]:
    """Fraction of ground truths covered at each IoU threshold (denominator ``max(M, 1)``)."""
    return [c / max(len(gts), 1) for c in recalled_counts(pred_boxes, gts, thresholds)]


def dataset_recall(pred_boxes_per_scene, gts_per_scene, thresholds) -> list[float]:
    hits = np.zeros(len(thresholds))
    total = 0
    for boxes, gts in zip(pred_boxes_per_scene, gts_per_scene):
        hits += recalled_counts(boxes, gts, thresholds)
        total += len(gts)
    return list(hits / max(total, 1))


def voc_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    """All-points interpolated area under a precision/recall curve."""
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def detections_from_probs(boxes: np.ndarray, probs: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One detection per query: best real class and its probability."""
    real = np.asarray(probs)[:, :-1]
    labels = real.argmax(axis=1)
    return np.asarray(boxes).reshape(-1, 5), labels, real[np.arange(len(labels)), labels]


def average_precision(dets_per_scene, gts_per_scene, iou_threshold: float = 0.5,
                      num_classes: int | None = None) -> tuple[dict[int, float], float]:
    """Per-class AP and their mean over classes that have ground truths.

    ``dets_per_scene`` holds ``(boxes [n,5], labels [n], scores [n])`` per scene.
    Detections are ranked by score (ties: scene, then index) and greedily
    matched to the unclaimed ground truth of highest IoU.
    """
    if num_classes is None:
        labels = [g.labels for g in gts_per_scene] + [d[1] for d in dets_per_scene]
        num_classes = int(max((l.max() for l in labels if len(l)), default=-1)) + 1
    aps = {}
    for c in range(num_classes):
        n_gt = sum(int(np.sum(g.labels == c)) for g in gts_per_scene)
        if n_gt == 0:
            continue
        entries = []
        for s, (boxes, labels, scores) in enumerate(dets_per_scene):
            for i in np.flatnonzero(np.asarray(labels) == c):
                entries.append((-float(scores[i]), s, int(i)))
        entries.sort()
        claimed = [np.zeros(int(np.sum(g.labels == c)), dtype=bool) for g in gts_per_scene]
        tp = np.zeros(len(entries))
        for k, (_, s, i) in enumerate(entries):
            g = gts_per_scene[s]
            gt_boxes = g.boxes[g.labels == c]
            if len(gt_boxes) == 0:
                continue
            ious = pairwise_iou(dets_per_scene[s][0][i], gt_boxes)[0]
            j = int(np.argmax(ious))
            if ious[j] >= iou_threshold and not claimed[s][j]:
                claimed[s][j] = True
                tp[k] = 1.0
        ctp = np.cumsum(tp)
        cfp = np.cumsum(1.0 - tp)
        rec = ctp / n_gt
        prec = ctp / np.maximum(ctp + cfp, np.finfo(np.float64).eps)
        aps[c] = voc_ap(rec, prec) if len(entries) else 0.0
    mean_ap = float(np.mean(list(aps.values()))) if aps else 0.0
    return aps, mean_ap


def mean_matched_iou(pred_boxes, gts: GroundTruthSet) -> tuple[float, int]:
    """Sum-of-IoU-maximising one-to-one assignment; returns (mean IoU, pairs)."""
    if len(gts) == 0:
        return 0.0, 0
    iou = pairwise_iou(pred_boxes, gts.boxes)
    match = hungarian_match(-iou)
    vals = [iou[q, g] for q, g in match.pairs]
    return float(np.mean(vals)), len(vals)


def class_hits(pred_boxes, probs, gts: GroundTruthSet,
               coeffs: LossCoefficients = LossCoefficients()) -> tuple[int, int]:
    """Matched ground truths whose query's arg-max class (no-object included) is right."""
    if len(gts) == 0:
        return 0, 0
    match = hungarian_match(cost_matrix(pred_boxes, probs, gts, coeffs))
    hits = sum(int(np.argmax(probs[q]) == gts.labels[g]) for q, g in match.pairs)
    return hits, len(match.pairs)


@dataclass
class MetricReport:
    thresholds: list[float]
    recall: list[float]
    ap: dict[int, float]
    mean_ap: float
    class_accuracy: float
    mean_iou: float
    counts: dict[str, int] = field(default_factory=dict)

    def rows(self) -> list[tuple[str, str, float]]:
        rows = [("recall", repr(float(t)), float(r)) for t, r in zip(self.thresholds, self.recall)]
        rows += [("ap", str(c), float(v)) for c, v in sorted(self.ap.items())]
        rows += [("map", "all", float(self.mean_ap)),
                 ("class_accuracy", "matched", float(self.class_accuracy)),
                 ("mean_matched_iou", "matched", float(self.mean_iou))]
        rows += [(f"count_{k}", "all", float(v)) for k, v in sorted(self.counts.items())]
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["metric", "threshold_or_class", "value"])
        for name, key, value in self.rows():
            writer.writerow([name, key, repr(value)])
        return buf.getvalue()


def evaluate(detections, gts_per_scene, thresholds=(0.2, 0.3, 0.4, 0.5), ap_iou: float = 0.5,
             num_classes: int | None = None) -> MetricReport:
    """Score a list of per-scene DetectionSets against their ground truths."""
    boxes = [d.boxes.data for d in detections]
    probs = [d.probabilities() for d in detections]
    recall = dataset_recall(boxes, gts_per_scene, thresholds)
    dets = [detections_from_probs(b, p) for b, p in zip(boxes, probs)]
    ap, mean_ap = average_precision(dets, gts_per_scene, ap_iou, num_classes)
    hits = pairs = 0
    iou_sum = 0.0
    n_iou = 0
    for b, p, g in zip(boxes, probs, gts_per_scene):
        h, n = class_hits(b, p, g)
        hits += h
        pairs += n
        m, k = mean_matched_iou(b, g)
        iou_sum += m * k
        n_iou += k
    counts = {"scenes": len(gts_per_scene), "gts": sum(len(g) for g in gts_per_scene),
              "detections": sum(len(b) for b in boxes)}
    return MetricReport(list(thresholds), recall, ap, mean_ap, hits / max(pairs, 1),
                        iou_sum / max(n_iou, 1), counts)
