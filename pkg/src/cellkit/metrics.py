"""Detection and instance-segmentation evaluation.

Detection: a prediction counts as TP when a ground-truth cell of the same
class lies within 15 px (inclusive); among candidate pairs the assignment
minimizes total distance at maximum cardinality, which is deterministic and
checkable against brute force. F1 = 2PR / (P + R).

Segmentation: PQ = DQ * SQ with unique IoU > 0.5 matching,
DQ = |TP| / (|TP| + |FP|/2 + |FN|/2) and SQ the mean matched IoU. mPQ
averages per-image per-class scores, skipping classes absent from an
image's ground truth (so spurious predictions of an absent class go
unpunished); mPQ+ pools TP/FP/FN and IoU sums per class across all images
first, then averages over classes, closing that hole.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import CellKitError, ShapeMismatch
from .postproc import InstanceMap

DETECTION_RADIUS = 15.0
CARBON_INTENSITY = 0.432  # kg CO2 eq. per kWh

_FORBIDDEN = 1e9


class EmptySuite(CellKitError):
    pass


class NegativeEnergy(CellKitError):
    pass


@dataclass
class MatchSets:
    """Unique matching between predictions and ground truth.

    TP holds (gt_id, pred_id, score) triples; FP/FN are unmatched ids.
    """

    tp: list[tuple[int, int, float]] = field(default_factory=list)
    fp: list[int] = field(default_factory=list)
    fn: list[int] = field(default_factory=list)

    def assert_unique(self) -> None:
        gt_ids = [g for g, _, _ in self.tp]
        pred_ids = [p for _, p, _ in self.tp]
        if len(set(gt_ids)) != len(gt_ids) or len(set(pred_ids)) != len(pred_ids):
            raise AssertionError("matching is not unique")
        if set(pred_ids) & set(self.fp) or set(gt_ids) & set(self.fn):
            raise AssertionError("matched ids reappear as FP/FN")

    @property
    def counts(self) -> tuple[int, int, int]:
        return len(self.tp), len(self.fp), len(self.fn)


def _match_points(
    pred: np.ndarray, gt: np.ndarray, radius: float
) -> tuple[list[tuple[int, int, float]], list[int], list[int]]:
    """Min-total-distance unique matching among pairs within `radius`."""
    if len(pred) == 0 or len(gt) == 0:
        return [], list(range(len(pred))), list(range(len(gt)))
    dist = np.linalg.norm(pred[:, None, :] - gt[None, :, :], axis=2)
    cost = np.where(dist <= radius, dist, _FORBIDDEN)
    rows, cols = linear_sum_assignment(cost)
    tp = []
    for r, c in zip(rows, cols):
        if dist[r, c] <= radius:
            tp.append((int(c), int(r), float(dist[r, c])))
    matched_pred = {p for _, p, _ in tp}
    matched_gt = {g for g, _, _ in tp}
    fp = [i for i in range(len(pred)) if i not in matched_pred]
    fn = [i for i in range(len(gt)) if i not in matched_gt]
    return tp, fp, fn


def match_detections(
    pred_centroids: np.ndarray,
    pred_classes: np.ndarray,
    gt_centroids: np.ndarray,
    gt_classes: np.ndarray,
    radius: float = DETECTION_RADIUS,
) -> dict[int, MatchSets]:
    """Per-class optimal centroid matching; ids are input row indices."""
    pred_centroids = np.atleast_2d(np.asarray(pred_centroids, dtype=np.float64))
    gt_centroids = np.atleast_2d(np.asarray(gt_centroids, dtype=np.float64))
    pred_classes = np.asarray(pred_classes)
    gt_classes = np.asarray(gt_classes)
    out: dict[int, MatchSets] = {}
    for cls in sorted(set(pred_classes.tolist()) | set(gt_classes.tolist())):
        p_idx = np.flatnonzero(pred_classes == cls)
        g_idx = np.flatnonzero(gt_classes == cls)
        tp, fp, fn = _match_points(
            pred_centroids[p_idx] if len(p_idx) else np.zeros((0, 2)),
            gt_centroids[g_idx] if len(g_idx) else np.zeros((0, 2)),
            radius,
        )
        match = MatchSets(
            tp=[(int(g_idx[g]), int(p_idx[p]), d) for g, p, d in tp],
            fp=[int(p_idx[i]) for i in fp],
            fn=[int(g_idx[i]) for i in fn],
        )
        match.assert_unique()
        out[int(cls)] = match
    return out


@dataclass
class DetectionScores:
    per_class: dict[int, tuple[float, float, float]]
    precision: float
    recall: float
    f1: float


def _prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def detection_scores(matches: dict[int, MatchSets]) -> DetectionScores:
    """Per-class precision/recall/F1 plus their class-averaged means.

    Classes with no predictions and no ground truth are skipped from the
    averages; within a class 0/0 counts as 0.
    """
    per_class = {}
    for cls, m in matches.items():
        tp, fp, fn = m.counts
        if tp + fp + fn == 0:
            continue
        per_class[cls] = _prf(tp, fp, fn)
    if per_class:
        means = tuple(float(np.mean([v[i] for v in per_class.values()])) for i in range(3))
    else:
        means = (0.0, 0.0, 0.0)
    return DetectionScores(per_class=per_class, precision=means[0], recall=means[1], f1=means[2])


@dataclass
class PQResult:
    dq: float
    sq: float
    pq: float
    n_tp: int
    n_fp: int
    n_fn: int
    iou_sum: float
    matches: list[tuple[int, int, float]] = field(default_factory=list)


def _pair_intersections(pred: np.ndarray, gt: np.ndarray) -> dict[tuple[int, int], int]:
    """Pixel intersection counts for co-located (gt_id, pred_id) label pairs."""
    both = (pred > 0) | (gt > 0)
    g = gt[both].astype(np.int64)
    p = pred[both].astype(np.int64)
    code = g * (int(pred.max()) + 1) + p
    values, counts = np.unique(code, return_counts=True)
    inter = {}
    base = int(pred.max()) + 1
    for v, n in zip(values.tolist(), counts.tolist()):
        gi, pi = divmod(v, base)
        if gi > 0 and pi > 0:
            inter[(gi, pi)] = int(n)
    return inter


def pq(pred: InstanceMap | np.ndarray, gt: InstanceMap | np.ndarray) -> PQResult:
    """Panoptic quality with the unique IoU > 0.5 matching.

    Empty-vs-empty is defined as DQ = SQ = PQ = 1.
    """
    pred = pred.labels if isinstance(pred, InstanceMap) else np.asarray(pred)
    gt = gt.labels if isinstance(gt, InstanceMap) else np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs gt {gt.shape}")

    pred_ids = np.unique(pred)
    pred_ids = pred_ids[pred_ids > 0]
    gt_ids = np.unique(gt)
    gt_ids = gt_ids[gt_ids > 0]
    if len(pred_ids) == 0 and len(gt_ids) == 0:
        return PQResult(1.0, 1.0, 1.0, 0, 0, 0, 0.0)

    pred_areas = np.bincount(pred.ravel())
    gt_areas = np.bincount(gt.ravel())
    matches = []
    matched_pred = set()
    matched_gt = set()
    for (gi, pi), inter in sorted(_pair_intersections(pred, gt).items()):
        union = int(gt_areas[gi]) + int(pred_areas[pi]) - inter
        iou = inter / union
        if iou > 0.5:
            matches.append((gi, pi, iou))
            matched_gt.add(gi)
            matched_pred.add(pi)

    n_tp = len(matches)
    n_fp = len(pred_ids) - len(matched_pred)
    n_fn = len(gt_ids) - len(matched_gt)
    iou_sum = float(sum(m[2] for m in matches))
    dq = n_tp / (n_tp + 0.5 * n_fp + 0.5 * n_fn) if (n_tp + n_fp + n_fn) else 1.0
    sq = iou_sum / n_tp if n_tp else 0.0
    return PQResult(dq=dq, sq=sq, pq=dq * sq, n_tp=n_tp, n_fp=n_fp, n_fn=n_fn,
                    iou_sum=iou_sum, matches=matches)


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """Binary foreground Dice; empty-vs-empty is 1."""
    a = pred > 0
    b = gt > 0
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


@dataclass
class ImagePair:
    """One evaluation image: instance maps plus instance-id -> class maps."""

    pred: np.ndarray
    gt: np.ndarray
    pred_classes: dict[int, int] = field(default_factory=dict)
    gt_classes: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        self.pred = self.pred.labels if isinstance(self.pred, InstanceMap) else np.asarray(self.pred)
        self.gt = self.gt.labels if isinstance(self.gt, InstanceMap) else np.asarray(self.gt)
        if self.pred.shape != self.gt.shape:
            raise ShapeMismatch(f"pred {self.pred.shape} vs gt {self.gt.shape}")


def _class_restricted(labels: np.ndarray, classes: dict[int, int], cls: int) -> np.ndarray:
    if not classes:
        return labels if cls == 1 else np.zeros_like(labels)
    wanted = {i for i, c in classes.items() if c == cls}
    if not wanted:
        return np.zeros_like(labels)
    keep = np.zeros(int(labels.max()) + 1, dtype=bool)
    for i in wanted:
        if i <= labels.max():
            keep[i] = True
    return np.where(keep[labels], labels, 0)


@dataclass
class PQReport:
    per_class: dict[int, PQResult]        # pooled across images (mPQ+ inputs)
    binary: PQResult                      # pooled binary counts
    mpq: float
    mpq_plus: float
    bpq: float
    dice: float

    def to_json(self) -> dict:
        return {
            "mPQ": self.mpq,
            "mPQ_plus": self.mpq_plus,
            "bPQ": self.bpq,
            "dice": self.dice,
            "per_class": {
                str(c): {"DQ": r.dq, "SQ": r.sq, "PQ": r.pq,
                         "TP": r.n_tp, "FP": r.n_fp, "FN": r.n_fn}
                for c, r in sorted(self.per_class.items())
            },
        }

    def to_csv_rows(self) -> list[list]:
        rows = [["scope", "metric", "value"]]
        for name, value in (("mPQ", self.mpq), ("mPQ_plus", self.mpq_plus),
                            ("bPQ", self.bpq), ("dice", self.dice)):
            rows.append(["aggregate", name, repr(value)])
        for c, r in sorted(self.per_class.items()):
            for name, value in (("DQ", r.dq), ("SQ", r.sq), ("PQ", r.pq)):
                rows.append([f"class_{c}", name, repr(value)])
        return rows


def _pooled_pq(n_tp: int, n_fp: int, n_fn: int, iou_sum: float) -> PQResult:
    if n_tp + n_fp + n_fn == 0:
        return PQResult(1.0, 1.0, 1.0, 0, 0, 0, 0.0)
    dq = n_tp / (n_tp + 0.5 * n_fp + 0.5 * n_fn)
    sq = iou_sum / n_tp if n_tp else 0.0
    return PQResult(dq, sq, dq * sq, n_tp, n_fp, n_fn, iou_sum)


def mpq_suite(images: Sequence[ImagePair]) -> PQReport:
    """Evaluate a suite of images; see the module docstring for the mPQ vs
    mPQ+ aggregation difference."""
    if not images:
        raise EmptySuite("no images to evaluate")

    all_classes = sorted(
        {c for img in images for c in img.gt_classes.values()}
        | {c for img in images for c in img.pred_classes.values()}
        or {1}
    )

    per_image_means = []
    pooled: dict[int, list] = {c: [0, 0, 0, 0.0] for c in all_classes}
    bpq_values = []
    dice_values = []
    b_tp = b_fp = b_fn = 0
    b_iou = 0.0

    for img in images:
        gt_ids = set(np.unique(img.gt).tolist()) - {0}
        if img.gt_classes:
            present = {img.gt_classes[i] for i in gt_ids if i in img.gt_classes}
        else:
            present = {1} if gt_ids else set()
        image_scores = []
        for cls in all_classes:
            pred_c = _class_restricted(img.pred, img.pred_classes, cls)
            gt_c = _class_restricted(img.gt, img.gt_classes, cls)
            r = pq(pred_c, gt_c)
            pool = pooled[cls]
            pool[0] += r.n_tp
            pool[1] += r.n_fp
            pool[2] += r.n_fn
            pool[3] += r.iou_sum
            if cls in present:
                image_scores.append(r.pq)
        if image_scores:  # images with empty GT are skipped from mPQ
            per_image_means.append(float(np.mean(image_scores)))

        rb = pq(img.pred, img.gt)
        bpq_values.append(rb.pq)
        b_tp += rb.n_tp
        b_fp += rb.n_fp
        b_fn += rb.n_fn
        b_iou += rb.iou_sum
        dice_values.append(dice(img.pred, img.gt))

    per_class = {c: _pooled_pq(*pooled[c]) for c in all_classes}
    plus_values = [r.pq for c, r in per_class.items() if r.n_tp + r.n_fp + r.n_fn > 0]

    return PQReport(
        per_class=per_class,
        binary=_pooled_pq(b_tp, b_fp, b_fn, b_iou),
        mpq=float(np.mean(per_image_means)) if per_image_means else 1.0,
        mpq_plus=float(np.mean(plus_values)) if plus_values else 1.0,
        bpq=float(np.mean(bpq_values)),
        dice=float(np.mean(dice_values)),
    )


def co2_report(energy_wh: float, carbon_intensity: float = CARBON_INTENSITY) -> float:
    """kg CO2 eq. for a measured energy draw in watt-hours."""
    if energy_wh < 0:
        raise NegativeEnergy(f"energy must be >= 0, got {energy_wh}")
    return energy_wh / 1000.0 * carbon_intensity
