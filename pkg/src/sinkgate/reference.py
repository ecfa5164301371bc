"""Slow, independent reference computations used as test oracles.

Nothing here shares code with the production paths it checks.
"""

from __future__ import annotations

import math

import numpy as np


def textbook_attention(q, k, v) -> np.ndarray:
    """softmax(q K^T / sqrt(D)) V in float64, one query row at a time."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros((q.shape[0], v.shape[1]))
    scale = 1.0 / math.sqrt(q.shape[1])
    for g in range(q.shape[0]):
        logits = [float(np.dot(q[g], k[i])) * scale for i in range(k.shape[0])]
        top = max(logits)
        w = [math.exp(x - top) for x in logits]
        total = math.fsum(w)
        for i, wi in enumerate(w):
            out[g] += (wi / total) * v[i]
    return out


def brute_force_pr(scores, labels) -> tuple[list[tuple[float, float, float]], float]:
    """Confusion matrix recomputed from scratch at every distinct threshold (O(n^2)).

    Returns ([(threshold, precision, recall)] descending, average precision).
    """
    scores = [float(s) for s in scores]
    labels = [bool(y) for y in labels]
    positives = sum(labels)
    points, ap, prev_recall = [], 0.0, 0.0
    for t in sorted(set(scores), reverse=True):
        tp = fp = 0
        for s, y in zip(scores, labels):
            if s >= t:
                if y:
                    tp += 1
                else:
                    fp += 1
        precision = tp / (tp + fp)
        recall = tp / positives
        points.append((t, precision, recall))
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return points, ap


def brute_force_threshold(scores, target_skip: float) -> float:
    """Scan every candidate threshold; keep the lowest one closest to the target skip."""
    scores = [float(s) for s in scores]
    n = len(scores)
    candidates = sorted(set(scores))
    candidates.insert(0, math.nextafter(candidates[0], -math.inf))
    best, best_err = None, math.inf
    for t in candidates:
        skip = sum(1 for s in scores if s > t) / n
        err = abs(skip - target_skip)
        if err < best_err - 1e-12:
            best, best_err = t, err
    return best


def lstsq_cubic(xs, ys) -> tuple[np.ndarray, float]:
    """Cubic least squares through the pseudo-inverse; returns (coefficients, SSR)."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    design = np.vander(x, 4)
    coef = np.linalg.pinv(design) @ y
    resid = design @ coef - y
    return coef, float(resid @ resid)
