"""Evaluation metrics: point-set IoU, grounding accuracy, semantic scores, ARI."""

from __future__ import annotations

import logging

import numpy as np
from scipy.special import comb

logger = logging.getLogger(__name__)


def iou(pred, gt) -> float:
    """|pred ∩ gt| / |pred ∪ gt| over boolean point labels; 0 for an empty union."""
    p = np.asarray(pred, dtype=bool)
    g = np.asarray(gt, dtype=bool)
    if p.shape != g.shape:
        raise ValueError("prediction and ground truth must label the same points")
    union = np.count_nonzero(p | g)
    if union == 0:
        logger.warning("IoU of two empty sets defined as 0")
        return 0.0
    return np.count_nonzero(p & g) / union


def acc_at(ious, tau: float) -> float:
    ious = np.asarray(ious, dtype=np.float64)
    if not len(ious):
        raise ValueError("no results to score")
    return float(np.mean(ious > tau))


def semantic_scores(pred, gt, classes=None):
    """Macro mIoU and mAcc over classes present in ``gt``."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    present = np.unique(gt) if classes is None else [c for c in classes if np.any(gt == c)]
    ious, accs = [], []
    for c in present:
        p, g = pred == c, gt == c
        ious.append(np.count_nonzero(p & g) / np.count_nonzero(p | g))
        accs.append(np.count_nonzero(p & g) / np.count_nonzero(g))
    if not ious:
        raise ValueError("no ground-truth class to score")
    return float(np.mean(ious)), float(np.mean(accs))


def ari(pred, gt) -> float:
    """Adjusted Rand index from the contingency table."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError("clusterings must cover the same items")
    n = len(pred)
    if n < 2:
        return 1.0
    _, pi = np.unique(pred, return_inverse=True)
    _, gi = np.unique(gt, return_inverse=True)
    table = np.zeros((pi.max() + 1, gi.max() + 1), dtype=np.int64)
    np.add.at(table, (pi, gi), 1)
    sum_ij = comb(table, 2).sum()
    sum_a = comb(table.sum(axis=1), 2).sum()
    sum_b = comb(table.sum(axis=0), 2).sum()
    expected = sum_a * sum_b / comb(n, 2)
    top = 0.5 * (sum_a + sum_b)
    if top == expected:
        return 1.0
    return float((sum_ij - expected) / (top - expected))


def majority_map(pred, gt) -> dict:
    """Predicted id -> most frequent ground-truth id among its points (lower id on ties)."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    out = {}
    for p in np.unique(pred):
        vals, counts = np.unique(gt[pred == p], return_counts=True)
        out[p.item()] = vals[np.argmax(counts)].item()
    return out


def hierarchy_errors(pred, gt, parents) -> list:
    """Mismatches between a predicted segment hierarchy and ground-truth parentage.

    ``pred`` and ``gt`` are (N, 3) id arrays ordered small, medium, large.
    ``parents`` maps scale index 0/1 to {child id: parent id}. Each predicted
    segment is identified with its majority ground-truth instance; the
    hierarchy matches when that identification is a bijection at every scale
    and every predicted parent link lands on the true parent.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    errors = []
    maps = [majority_map(pred[:, s], gt[:, s]) for s in range(3)]
    for s in range(3):
        truth = set(np.unique(gt[:, s]).tolist())
        if sorted(maps[s].values()) != sorted(truth):
            errors.append(("not-bijective", s, maps[s]))
    for s in (0, 1):
        true_parent = majority_map(gt[:, s], gt[:, s + 1])
        for child, parent in parents[s].items():
            if child not in maps[s] or parent not in maps[s + 1]:
                continue
            if true_parent.get(maps[s][child]) != maps[s + 1][parent]:
                errors.append(("parent", s, child, parent))
    return errors
