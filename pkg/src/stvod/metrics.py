"""Detection quality metrics: IoU, average precision, size-bucketed reports.

Follows the common COCO conventions: greedy score-ordered matching, 101-point
interpolated precision-recall integration, size buckets at 32^2 and 96^2
pixels, and ignore semantics for out-of-bucket ground truth (detections
matched to ignored truth vanish from the ranking instead of counting as
false positives).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
SMALL_MAX_AREA = 32.0 ** 2
MEDIUM_MAX_AREA = 96.0 ** 2
BUCKETS = {
    "S": (0.0, SMALL_MAX_AREA),
    "M": (SMALL_MAX_AREA, MEDIUM_MAX_AREA),
    "L": (MEDIUM_MAX_AREA, float("inf")),
}


@dataclass(frozen=True)
class Detection:
    frame: int
    class_id: int
    score: float
    bbox: tuple[float, float, float, float]


@dataclass(frozen=True)
class GroundTruth:
    frame: int
    class_id: int
    bbox: tuple[float, float, float, float]
    ignore: bool = False


@dataclass
class EvalReport:
    mAP50: float | None
    mAP50_95: float | None
    mAP_S: float | None
    mAP_M: float | None
    mAP_L: float | None
    per_class: dict[int, float] = field(default_factory=dict)
    n_detections: int = 0
    n_truths: int = 0

    def to_json(self) -> str:
        return json.dumps({
            "mAP50": self.mAP50, "mAP50_95": self.mAP50_95,
            "mAP_S": self.mAP_S, "mAP_M": self.mAP_M, "mAP_L": self.mAP_L,
            "per_class": {str(k): v for k, v in self.per_class.items()},
            "n_detections": self.n_detections, "n_truths": self.n_truths,
        }, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        raw = json.loads(text)
        return cls(
            raw["mAP50"], raw["mAP50_95"], raw["mAP_S"], raw["mAP_M"],
            raw["mAP_L"], {int(k): v for k, v in raw["per_class"].items()},
            raw["n_detections"], raw["n_truths"],
        )


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU between two stacks of (cx, cy, w, h) boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ax0, ax1 = a[:, 0] - a[:, 2] / 2, a[:, 0] + a[:, 2] / 2
    ay0, ay1 = a[:, 1] - a[:, 3] / 2, a[:, 1] + a[:, 3] / 2
    bx0, bx1 = b[:, 0] - b[:, 2] / 2, b[:, 0] + b[:, 2] / 2
    by0, by1 = b[:, 1] - b[:, 3] / 2, b[:, 1] + b[:, 3] / 2
    iw = np.maximum(0.0, np.minimum(ax1[:, None], bx1) - np.maximum(ax0[:, None], bx0))
    ih = np.maximum(0.0, np.minimum(ay1[:, None], by1) - np.maximum(ay0[:, None], by0))
    inter = iw * ih
    union = (a[:, 2] * a[:, 3])[:, None] + b[:, 2] * b[:, 3] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def _interpolated_ap(flags: list[str], n_pos: int) -> float:
    """101-point AP from an ordered TP/FP flag sequence."""
    tp = 0
    kept = 0
    curve = []  # (recall, precision) after each kept detection
    for flag in flags:
        if flag == "ignore":
            continue
        kept += 1
        if flag == "tp":
            tp += 1
        curve.append((tp / n_pos, tp / kept))
    ap = 0.0
    for i in range(101):
        r = i / 100.0
        best = 0.0
        for rec, prec in curve:
            if rec >= r and prec > best:
                best = prec
        ap += best / 101.0
    return ap


def _rank(dets) -> list[int]:
    # stable order: descending score, input order breaks ties
    return sorted(range(len(dets)), key=lambda i: (-dets[i][0], i))


def _greedy_flags(scored, truths, iou_thr, det_area_ok=None):
    """Match score-ranked detections to truths one frame at a time.

    ``scored``: (score, frame, bbox) tuples; ``truths``: (frame, bbox, ignore).
    Real truths are tried first, ignored ones absorb leftovers. Returns the
    per-detection flag sequence and the count of real truths.
    """
    by_frame: dict[int, list[int]] = {}
    for j, (frame, _, _) in enumerate(truths):
        by_frame.setdefault(frame, []).append(j)
    taken = [False] * len(truths)
    flags = []
    for i in _rank(scored):
        _, frame, bbox = scored[i]
        best_j, best_v = -1, -1.0
        for j in by_frame.get(frame, ()):
            if taken[j] or truths[j][2]:
                continue
            v = float(iou_matrix([bbox], [truths[j][1]])[0, 0])
            if v >= iou_thr and v > best_v:
                best_j, best_v = j, v
        if best_j >= 0:
            taken[best_j] = True
            flags.append("tp")
            continue
        spare_j, spare_v = -1, -1.0
        for j in by_frame.get(frame, ()):
            if taken[j] or not truths[j][2]:
                continue
            v = float(iou_matrix([bbox], [truths[j][1]])[0, 0])
            if v >= iou_thr and v > spare_v:
                spare_j, spare_v = j, v
        if spare_j >= 0:
            taken[spare_j] = True
            flags.append("ignore")
        elif det_area_ok is not None and not det_area_ok(bbox):
            flags.append("ignore")
        else:
            flags.append("fp")
    n_pos = sum(1 for t in truths if not t[2])
    return flags, n_pos


def average_precision(dets, gts, iou_thr: float) -> float:
    """Single-class AP; dets = (frame, score, bbox), gts = (frame, bbox)."""
    if not gts:
        return 0.0
    scored = [(score, frame, bbox) for frame, score, bbox in dets]
    truths = [(frame, bbox, False) for frame, bbox in gts]
    flags, n_pos = _greedy_flags(scored, truths, iou_thr)
    return _interpolated_ap(flags, n_pos)


def _bucket_ap(dets, gts, iou_thr, image_size, bucket):
    """AP for one class with optional area-bucket ignore rules."""
    def area(bbox):
        return bbox[2] * image_size * bbox[3] * image_size

    def in_bucket(bbox):
        lo, hi = bucket
        return lo <= area(bbox) < hi

    truths = []
    for g in gts:
        ignore = g.ignore or (bucket is not None and not in_bucket(g.bbox))
        truths.append((g.frame, g.bbox, ignore))
    n_pos = sum(1 for t in truths if not t[2])
    if n_pos == 0:
        return None
    scored = [(d.score, d.frame, d.bbox) for d in dets]
    flags, n_pos = _greedy_flags(
        scored, truths, iou_thr,
        det_area_ok=in_bucket if bucket is not None else None,
    )
    return _interpolated_ap(flags, n_pos)


def evaluate(detections, truths, image_size: int) -> EvalReport:
    """Full report over per-frame detections and ground truths.

    mAP50_95 and the size buckets average over the ten IoU thresholds;
    per-class holds AP at 0.5.  Buckets with no ground truth report None.
    """
    if image_size < 1:
        raise ContractError(f"image_size must be positive, got {image_size}")
    detections = list(detections)
    truths = list(truths)
    class_ids = sorted({g.class_id for g in truths if not g.ignore})
    by_class_det = {c: [d for d in detections if d.class_id == c] for c in class_ids}
    by_class_gt = {c: [g for g in truths if g.class_id == c] for c in class_ids}

    def mean_ap(iou_thr, bucket):
        values = [
            _bucket_ap(by_class_det[c], by_class_gt[c], iou_thr, image_size, bucket)
            for c in class_ids
        ]
        values = [v for v in values if v is not None]
        return (sum(values) / len(values)) if values else None

    per_class = {
        c: _bucket_ap(by_class_det[c], by_class_gt[c], 0.5, image_size, None)
        for c in class_ids
    }
    sweeps = [mean_ap(t, None) for t in IOU_THRESHOLDS]
    sweeps = [v for v in sweeps if v is not None]
    buckets = {}
    for name, bucket in BUCKETS.items():
        vals = [mean_ap(t, bucket) for t in IOU_THRESHOLDS]
        vals = [v for v in vals if v is not None]
        buckets[name] = (sum(vals) / len(vals)) if vals else None
    return EvalReport(
        mAP50=mean_ap(0.5, None),
        mAP50_95=(sum(sweeps) / len(sweeps)) if sweeps else None,
        mAP_S=buckets["S"], mAP_M=buckets["M"], mAP_L=buckets["L"],
        per_class=per_class,
        n_detections=len(detections),
        n_truths=sum(1 for g in truths if not g.ignore),
    )
