"""Set-based detection losses: bipartite matching, focal loss, box overlap.

Boxes are (cx, cy, w, h) in normalized image coordinates throughout.  The
matcher runs on detached numpy values; only the loss terms build graph.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError
from .tensor import Tensor, log_sigmoid, maximum, minimum, power, sigmoid

CLS_WEIGHT = 2.0
L1_WEIGHT = 5.0
GIOU_WEIGHT = 2.0
FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0


def _corners(boxes: np.ndarray) -> tuple[np.ndarray, ...]:
    cx, cy, w, h = boxes[..., 0], boxes[..., 1], boxes[..., 2], boxes[..., 3]
    return cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2


def giou_pairwise(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """GIoU between every box in ``a`` [n,4] and every box in ``b`` [m,4]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ax0, ay0, ax1, ay1 = (c[:, None] for c in _corners(a))
    bx0, by0, bx1, by1 = (c[None, :] for c in _corners(b))
    iw = np.maximum(0.0, np.minimum(ax1, bx1) - np.maximum(ax0, bx0))
    ih = np.maximum(0.0, np.minimum(ay1, by1) - np.maximum(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    hull = (np.maximum(ax1, bx1) - np.minimum(ax0, bx0)) * (
        np.maximum(ay1, by1) - np.minimum(ay0, by0)
    )
    union = np.maximum(union, 1e-12)
    hull = np.maximum(hull, 1e-12)
    return inter / union - (hull - union) / hull


def giou_aligned(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Differentiable GIoU of matched box pairs: pred [k,4] against gt [k,4]."""
    gt = np.asarray(gt, dtype=np.float64)
    px0 = pred[:, 0] - pred[:, 2] * 0.5
    py0 = pred[:, 1] - pred[:, 3] * 0.5
    px1 = pred[:, 0] + pred[:, 2] * 0.5
    py1 = pred[:, 1] + pred[:, 3] * 0.5
    gx0, gy0, gx1, gy1 = _corners(gt)
    iw = maximum(minimum(px1, gx1) - maximum(px0, gx0), 0.0)
    ih = maximum(minimum(py1, gy1) - maximum(py0, gy0), 0.0)
    inter = iw * ih
    union = (px1 - px0) * (py1 - py0) + (gx1 - gx0) * (gy1 - gy0) - inter
    hull = (maximum(px1, gx1) - minimum(px0, gx0)) * (
        maximum(py1, gy1) - minimum(py0, gy0)
    )
    return inter / union - (hull - union) / hull


def focal_loss(logits: Tensor, onehot: np.ndarray,
               alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA) -> Tensor:
    """Total sigmoid focal loss over every (query, class) cell, unnormalized.

    ``onehot`` marks the matched class of each query; all-zero rows are
    background and contribute only the negative term.
    """
    t = np.asarray(onehot, dtype=np.float64)
    if t.shape != logits.shape:
        raise ContractError(
            f"focal targets shape {t.shape} does not match logits {logits.shape}"
        )
    p = sigmoid(logits)
    pos = power(1.0 - p, gamma) * log_sigmoid(logits) * (-alpha)
    neg = power(p, gamma) * log_sigmoid(-logits) * (alpha - 1.0)
    return (pos * t + neg * (1.0 - t)).sum()


def match_cost(logits: np.ndarray, boxes: np.ndarray,
               gt_classes: np.ndarray, gt_boxes: np.ndarray,
               weights: tuple[float, float, float] = (CLS_WEIGHT, L1_WEIGHT, GIOU_WEIGHT),
               alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA) -> np.ndarray:
    """Cost matrix [n_pred, n_gt] used to pick one query per ground-truth box."""
    logits = np.asarray(logits, dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.float64)
    gt_classes = np.asarray(gt_classes, dtype=np.int64)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    lam_cls, lam_l1, lam_giou = weights

    z = logits[:, gt_classes]
    p = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                 np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
    pos = alpha * (1.0 - p) ** gamma * -np.log(p + 1e-8)
    neg = (1.0 - alpha) * p ** gamma * -np.log(1.0 - p + 1e-8)
    cls_cost = pos - neg

    l1 = np.abs(boxes[:, None, :] - gt_boxes[None, :, :]).sum(axis=-1)
    giou = giou_pairwise(boxes, gt_boxes)
    return lam_cls * cls_cost + lam_l1 * l1 + lam_giou * (1.0 - giou)


def hungarian_match(cost: np.ndarray) -> list[tuple[int, int]]:
    """Minimum-cost assignment of predictions [rows] to ground truths [cols].

    Shortest-augmenting-path algorithm with dual potentials, run with ground
    truths on the short side so each augmentation scans predictions once.
    Returns (pred_idx, gt_idx) pairs sorted by prediction index.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ContractError(f"cost matrix must be 2-d, got shape {cost.shape}")
    n_pred, n_gt = cost.shape
    if n_gt == 0:
        return []
    if n_gt > n_pred:
        raise ContractError(f"{n_gt} targets but only {n_pred} predictions")
    if not np.all(np.isfinite(cost)):
        raise ContractError("cost matrix contains non-finite entries")

    # rows = ground truths (1-based), columns = predictions (1-based);
    # column 0 is the scratch slot holding the row being inserted
    c = cost.T
    n, m = n_gt, n_pred
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=np.int64)
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            reduced = c[i0 - 1, :] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            j1 = int(np.argmin(np.where(free, minv[1:], np.inf))) + 1
            delta = minv[j1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    return sorted((j - 1, int(owner[j]) - 1) for j in range(1, m + 1) if owner[j])


def detection_loss(stage_frames, weights=(CLS_WEIGHT, L1_WEIGHT, GIOU_WEIGHT),
                   alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA) -> Tensor:
    """Matched detection loss summed over prediction stages.

    ``stage_frames`` is a list over stages; each stage is a list over frames of
    (class_logits [n_q, n_cls], boxes [n_q, 4], gt_classes, gt_boxes).  Every
    stage is normalized by the total ground-truth count across its frames so
    frames with no objects still contribute their background class term.
    """
    from .tensor import take_rows

    lam_cls, lam_l1, lam_giou = weights
    total = Tensor(0.0)
    for frames in stage_frames:
        norm = max(1, sum(len(frame[2]) for frame in frames))
        for logits, boxes, gt_classes, gt_boxes in frames:
            gt_classes = np.asarray(gt_classes, dtype=np.int64)
            gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
            onehot = np.zeros(logits.shape)
            box_terms = None
            if len(gt_classes):
                cost = match_cost(logits.data, boxes.data, gt_classes, gt_boxes,
                                  (lam_cls, lam_l1, lam_giou), alpha, gamma)
                pairs = hungarian_match(cost)
                pred_idx = np.array([i for i, _ in pairs], dtype=np.int64)
                gt_idx = np.array([j for _, j in pairs], dtype=np.int64)
                onehot[pred_idx, gt_classes[gt_idx]] = 1.0
                matched = take_rows(boxes, pred_idx)
                l1 = (matched - gt_boxes[gt_idx]).abs().sum()
                giou = giou_aligned(matched, gt_boxes[gt_idx])
                box_terms = lam_l1 * l1 + lam_giou * (float(len(pairs)) - giou.sum())
            terms = lam_cls * focal_loss(logits, onehot, alpha, gamma)
            if box_terms is not None:
                terms = terms + box_terms
            total = total + terms * (1.0 / norm)
    return total
