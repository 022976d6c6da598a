"""Independent reference implementations used to cross-check the fast paths.

Everything here is written scalar-first in 64-bit with plain Python loops and
deliberately shares no code with the modules it checks.  The test suite and
the ``oracle`` CLI subcommand both run these against the real implementations.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


# -- attention ---------------------------------------------------------------


def mha_reference(z, x, wq, bq, wk, bk, wv, bv, wo, bo, heads: int) -> np.ndarray:
    """Dense multi-head attention, one query/key/head at a time."""
    z = np.asarray(z, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    n_q, d = z.shape
    n_k = x.shape[0]
    cv = d // heads
    q = z @ np.asarray(wq, np.float64) + bq
    k = x @ np.asarray(wk, np.float64) + bk
    v = x @ np.asarray(wv, np.float64) + bv
    stacked = np.zeros((n_q, d))
    for m in range(heads):
        qm = q[:, m * cv:(m + 1) * cv]
        km = k[:, m * cv:(m + 1) * cv]
        vm = v[:, m * cv:(m + 1) * cv]
        for i in range(n_q):
            logits = [float(qm[i] @ km[j]) / math.sqrt(cv) for j in range(n_k)]
            peak = max(logits)
            weights = [math.exp(l - peak) for l in logits]
            total = sum(weights)
            mix = np.zeros(cv)
            for j in range(n_k):
                mix += (weights[j] / total) * vm[j]
            stacked[i, m * cv:(m + 1) * cv] = mix
    return stacked @ np.asarray(wo, np.float64) + bo


def bilinear_reference(fmap, x: float, y: float) -> np.ndarray:
    """Scalar bilinear lookup at pixel coords (x, y); zeros outside the map."""
    fmap = np.asarray(fmap, dtype=np.float64)
    h, w = fmap.shape[:2]

    def at(yi: int, xi: int) -> np.ndarray:
        if 0 <= yi < h and 0 <= xi < w:
            return fmap[yi, xi]
        return np.zeros(fmap.shape[2])

    x0, y0 = math.floor(x), math.floor(y)
    fx, fy = x - x0, y - y0
    return (
        at(y0, x0) * (1 - fx) * (1 - fy)
        + at(y0, x0 + 1) * fx * (1 - fy)
        + at(y0 + 1, x0) * (1 - fx) * fy
        + at(y0 + 1, x0 + 1) * fx * fy
    )


def deform_attn_reference(z, refs, fmap, ws, bs, wv, bv, wo, bo,
                          heads: int, points: int) -> np.ndarray:
    """Single-frame deformable attention, query by query."""
    z = np.asarray(z, dtype=np.float64)
    refs = np.asarray(refs, dtype=np.float64)
    fmap = np.asarray(fmap, dtype=np.float64)
    n, d = z.shape
    cv = d // heads
    h, w = fmap.shape[:2]
    values = fmap.reshape(h * w, d) @ np.asarray(wv, np.float64) + bv
    values = values.reshape(h, w, d)
    out = np.zeros((n, d))
    for i in range(n):
        raw = z[i] @ np.asarray(ws, np.float64) + bs
        offsets = raw[: 2 * heads * points].reshape(heads, points, 2)
        logits = raw[2 * heads * points:].reshape(heads, points)
        for m in range(heads):
            peak = logits[m].max()
            expw = np.exp(logits[m] - peak)
            attn = expw / expw.sum()
            mix = np.zeros(cv)
            for kk in range(points):
                px = (refs[i, 0] + offsets[m, kk, 0]) * (w - 1)
                py = (refs[i, 1] + offsets[m, kk, 1]) * (h - 1)
                sample = bilinear_reference(values[:, :, m * cv:(m + 1) * cv], px, py)
                mix += attn[kk] * sample
            out[i, m * cv:(m + 1) * cv] = mix
    return out @ np.asarray(wo, np.float64) + bo


# -- assignment --------------------------------------------------------------


def brute_force_assignment(cost) -> tuple[float, list[tuple[int, int]]]:
    """Optimal assignment by enumerating permutations; n_gt <= n_pred <= ~8."""
    cost = np.asarray(cost, dtype=np.float64)
    n_pred, n_gt = cost.shape
    best = None
    best_rows: tuple[int, ...] = ()
    for rows in itertools.permutations(range(n_pred), n_gt):
        total = sum(cost[r, c] for c, r in enumerate(rows))
        if best is None or total < best - 1e-12:
            best = total
            best_rows = rows
    pairs = sorted((r, c) for c, r in enumerate(best_rows))
    return float(best), pairs


# -- focal / detection losses -------------------------------------------------


def focal_reference(logits, targets, alpha: float, gamma: float) -> float:
    """Per-element sigmoid focal loss, normalized by matched target count."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets)
    n, n_cls = logits.shape
    total = 0.0
    matched = max(1, int((targets >= 0).sum()))
    for i in range(n):
        for c in range(n_cls):
            z = float(logits[i, c])
            p = 1.0 / (1.0 + math.exp(-z)) if z >= 0 else math.exp(z) / (1.0 + math.exp(z))
            log_p = -math.log1p(math.exp(-abs(z))) + min(z, 0.0)
            log_1mp = -math.log1p(math.exp(-abs(z))) + min(-z, 0.0)
            if targets[i] == c:
                total += -alpha * (1.0 - p) ** gamma * log_p
            else:
                total += -(1.0 - alpha) * p ** gamma * log_1mp
    return total / matched


def giou_reference(a, b) -> float:
    """GIoU of two (cx, cy, w, h) boxes via corner arithmetic in 64-bit."""
    ax0, ay0 = a[0] - a[2] / 2, a[1] - a[3] / 2
    ax1, ay1 = a[0] + a[2] / 2, a[1] + a[3] / 2
    bx0, by0 = b[0] - b[2] / 2, b[1] - b[3] / 2
    bx1, by1 = b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    hull = (max(ax1, bx1) - min(ax0, bx0)) * (max(ay1, by1) - min(ay0, by0))
    return inter / union - (hull - union) / hull


def giou_rasterized(a, b, grid: int = 512) -> float:
    """Monte-Carlo-free GIoU check: count cells of a fine raster."""
    def mask(box):
        x0, y0 = box[0] - box[2] / 2, box[1] - box[3] / 2
        x1, y1 = box[0] + box[2] / 2, box[1] + box[3] / 2
        xs = (np.arange(grid) + 0.5) / grid
        ys = (np.arange(grid) + 0.5) / grid
        return ((xs >= x0) & (xs < x1))[None, :] & ((ys >= y0) & (ys < y1))[:, None]

    ma, mb = mask(a), mask(b)
    inter = float((ma & mb).sum())
    union = float((ma | mb).sum())
    xs0 = min(a[0] - a[2] / 2, b[0] - b[2] / 2)
    ys0 = min(a[1] - a[3] / 2, b[1] - b[3] / 2)
    xs1 = max(a[0] + a[2] / 2, b[0] + b[2] / 2)
    ys1 = max(a[1] + a[3] / 2, b[1] + b[3] / 2)
    hull = (xs1 - xs0) * (ys1 - ys0) * grid * grid
    return inter / union - (hull - union) / hull


def match_cost_reference(logits, boxes, gt_classes, gt_boxes, weights) -> np.ndarray:
    """Scalar matching-cost matrix: focal-style class cost + L1 + (1 - GIoU)."""
    logits = np.asarray(logits, dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.float64)
    lam_cls, lam_l1, lam_giou = weights
    alpha, gamma = 0.25, 2.0
    n, g = logits.shape[0], len(gt_classes)
    cost = np.zeros((n, g))
    for i in range(n):
        for j in range(g):
            z = logits[i, int(gt_classes[j])]
            p = 1.0 / (1.0 + math.exp(-z)) if z >= 0 else math.exp(z) / (1.0 + math.exp(z))
            pos = alpha * (1.0 - p) ** gamma * -math.log(p + 1e-8)
            neg = (1.0 - alpha) * p ** gamma * -math.log(1.0 - p + 1e-8)
            l1 = sum(abs(boxes[i, t] - gt_boxes[j][t]) for t in range(4))
            cost[i, j] = (
                lam_cls * (pos - neg)
                + lam_l1 * l1
                + lam_giou * (1.0 - giou_reference(boxes[i], gt_boxes[j]))
            )
    return cost


def detection_loss_reference(stage_frames, weights, alpha=0.25, gamma=2.0) -> float:
    """End-to-end loss oracle: per stage, match each frame then sum the terms.

    stage_frames: list over stages of lists over frames of
    (logits, boxes, gt_classes, gt_boxes) in plain arrays.
    """
    lam_cls, lam_l1, lam_giou = weights
    total = 0.0
    for frames in stage_frames:
        matched_total = sum(len(f[2]) for f in frames)
        norm = max(1, matched_total)
        for logits, boxes, gt_classes, gt_boxes in frames:
            n = len(logits)
            targets = [-1] * n
            l1_term = 0.0
            giou_term = 0.0
            if len(gt_classes):
                cost = match_cost_reference(
                    logits, boxes, gt_classes, gt_boxes, weights
                )
                _, pairs = brute_force_assignment(cost)
                for i, j in pairs:
                    targets[i] = int(gt_classes[j])
                    l1_term += sum(abs(boxes[i][t] - gt_boxes[j][t]) for t in range(4))
                    giou_term += 1.0 - giou_reference(boxes[i], gt_boxes[j])
            cls_term = focal_reference(logits, targets, alpha, gamma) * max(
                1, int(np.sum(np.asarray(targets) >= 0))
            )
            total += (
                lam_cls * cls_term / norm
                + lam_l1 * l1_term / norm
                + lam_giou * giou_term / norm
            )
    return total


# -- evaluation ---------------------------------------------------------------


def average_precision_reference(dets, gts, iou_thr: float) -> float:
    """101-point interpolated AP; dets = (frame, score, box), gts = (frame, box)."""

    def iou(a, b):
        ax0, ay0 = a[0] - a[2] / 2, a[1] - a[3] / 2
        ax1, ay1 = a[0] + a[2] / 2, a[1] + a[3] / 2
        bx0, by0 = b[0] - b[2] / 2, b[1] - b[3] / 2
        bx1, by1 = b[0] + b[2] / 2, b[1] + b[3] / 2
        iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
        ih = max(0.0, min(ay1, by1) - max(ay0, by0))
        inter = iw * ih
        union = a[2] * a[3] + b[2] * b[3] - inter
        return inter / union if union > 0 else 0.0

    if not gts:
        return 0.0
    order = sorted(range(len(dets)), key=lambda i: -dets[i][1])
    taken = [False] * len(gts)
    flags = []
    for i in order:
        frame, _, box = dets[i]
        best_j, best_v = -1, -1.0
        for j, (gframe, gbox) in enumerate(gts):
            if gframe != frame or taken[j]:
                continue
            v = iou(box, gbox)
            if v >= iou_thr and v > best_v:
                best_j, best_v = j, v
        if best_j >= 0:
            taken[best_j] = True
            flags.append(True)
        else:
            flags.append(False)
    tp = 0
    precisions = []
    recalls = []
    for idx, is_tp in enumerate(flags):
        if is_tp:
            tp += 1
        precisions.append(tp / (idx + 1))
        recalls.append(tp / len(gts))
    ap = 0.0
    for r in [i / 100.0 for i in range(101)]:
        best_p = 0.0
        for p, rec in zip(precisions, recalls):
            if rec >= r and p > best_p:
                best_p = p
        ap += best_p / 101.0
    return ap


def evaluate_reference(dets, gts, image_size: int) -> dict:
    """Scalar re-implementation of the full evaluation report.

    dets: (frame, class_id, score, bbox); gts: (frame, class_id, bbox, ignore).
    Shares the conventions of the fast path (score-then-input-order ranking,
    real-before-ignore greedy matching, 101-point interpolation, COCO areas)
    but none of the code.
    """

    def iou(a, b):
        ax0, ay0 = a[0] - a[2] / 2, a[1] - a[3] / 2
        ax1, ay1 = a[0] + a[2] / 2, a[1] + a[3] / 2
        bx0, by0 = b[0] - b[2] / 2, b[1] - b[3] / 2
        bx1, by1 = b[0] + b[2] / 2, b[1] + b[3] / 2
        iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
        ih = max(0.0, min(ay1, by1) - max(ay0, by0))
        inter = iw * ih
        union = a[2] * a[3] + b[2] * b[3] - inter
        return inter / union if union > 0 else 0.0

    def box_area(b):
        return b[2] * image_size * b[3] * image_size

    def class_ap(cls, thr, bucket):
        pool = [(f, b, ig) for f, c, b, ig in gts if c == cls]
        marks = []
        for f, b, ig in pool:
            out_of_bucket = bucket is not None and not (
                bucket[0] <= box_area(b) < bucket[1]
            )
            marks.append(ig or out_of_bucket)
        n_real = marks.count(False)
        if n_real == 0:
            return None
        mine = [(s, i, f, b) for i, (f, c, s, b) in enumerate(dets) if c == cls]
        mine.sort(key=lambda t: (-t[0], t[1]))
        used = [False] * len(pool)
        tp = kept = 0
        curve = []
        for s, _, f, b in mine:
            found = None
            for want_ignore in (False, True):
                best_v = -1.0
                for j, (gf, gb, _) in enumerate(pool):
                    if gf != f or used[j] or marks[j] != want_ignore:
                        continue
                    v = iou(b, gb)
                    if v >= thr and v > best_v:
                        best_v, found = v, (j, want_ignore)
                if found is not None:
                    break
            if found is not None:
                used[found[0]] = True
                if not found[1]:
                    tp += 1
                    kept += 1
                    curve.append((tp / n_real, tp / kept))
                continue
            if bucket is not None and not (
                bucket[0] <= box_area(b) < bucket[1]
            ):
                continue
            kept += 1
            curve.append((tp / n_real, tp / kept))
        ap = 0.0
        for i in range(101):
            want = i / 100.0
            ap += max((p for r, p in curve if r >= want), default=0.0) / 101.0
        return ap

    classes = sorted({c for _, c, _, ig in gts if not ig})
    thresholds = [0.5 + 0.05 * i for i in range(10)]
    areas = {"S": (0.0, 1024.0), "M": (1024.0, 9216.0), "L": (9216.0, math.inf)}

    def mean_over_classes(thr, bucket):
        vals = [class_ap(c, thr, bucket) for c in classes]
        vals = [v for v in vals if v is not None]
        return sum(vals) / len(vals) if vals else None

    sweep = [mean_over_classes(t, None) for t in thresholds]
    sweep = [v for v in sweep if v is not None]
    report = {
        "mAP50": mean_over_classes(0.5, None),
        "mAP50_95": sum(sweep) / len(sweep) if sweep else None,
        "per_class": {c: class_ap(c, 0.5, None) for c in classes},
    }
    for name, bucket in areas.items():
        vals = [mean_over_classes(t, bucket) for t in thresholds]
        vals = [v for v in vals if v is not None]
        report[f"mAP_{name}"] = sum(vals) / len(vals) if vals else None
    return report


def roi_reference(memory, boxes, bins=7):
    """Scalar 64-bit pooled-region features: bilinear at bin centers, averaged."""
    fmap = np.asarray(memory, dtype=np.float64)
    h, w, d = fmap.shape

    def sample(px, py):
        x0, y0 = math.floor(px), math.floor(py)
        out = np.zeros(d)
        for dy in (0, 1):
            for dx in (0, 1):
                xi, yi = x0 + dx, y0 + dy
                if 0 <= xi < w and 0 <= yi < h:
                    wt = (1 - abs(px - xi)) * (1 - abs(py - yi))
                    out += wt * fmap[yi, xi]
        return out

    rois = []
    for cx, cy, bw, bh in np.asarray(boxes, dtype=np.float64):
        if bw < 1e-4:
            bw = 0.0
        if bh < 1e-4:
            bh = 0.0
        acc = np.zeros(d)
        for i in range(bins):
            for j in range(bins):
                x = cx + bw * ((j + 0.5) / bins - 0.5)
                y = cy + bh * ((i + 0.5) / bins - 0.5)
                acc += sample(x * (w - 1), y * (h - 1))
        rois.append(acc / (bins * bins))
    return np.stack(rois)
