"""Ground-truth sink labels and diagnostic statistics.

Everything here is a pure function of its inputs and runs in float64.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

NORMALIZATION_TOL = 1e-4
BOUND_SLACK = 1e-6


@dataclass(frozen=True)
class OracleLabel:
    alpha0: float
    is_sink: bool


def _rows(weights) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim == 1:
        w = w[None, :]
    if w.ndim != 2 or w.shape[1] < 1:
        raise ValueError(f"expected weight rows [G, L], got shape {w.shape}")
    off = np.abs(w.sum(axis=1) - 1.0)
    if off.max() > NORMALIZATION_TOL:
        raise ValueError(f"weight rows are not normalized (max |sum - 1| = {off.max():.3e})")
    return w


def oracle_labels(weights, gamma: float, mode: str = "head", bos_index: int = 0) -> list[OracleLabel]:
    """Label rows (``head``) or the whole group (``group-mean``) by alpha_0 > gamma."""
    w = _rows(weights)
    alpha0 = w[:, bos_index]
    if mode == "head":
        return [OracleLabel(float(a), bool(a > gamma)) for a in alpha0]
    if mode == "group-mean":
        a = float(alpha0.mean())
        return [OracleLabel(a, a > gamma)]
    raise ValueError(f"unknown label mode {mode!r}")


@dataclass(frozen=True)
class OperatingPoint:
    threshold: float
    precision: float
    recall: float
    f1: float
    tp: int = 0
    fp: int = 0
    fn: int = 0


@dataclass
class PrCurve:
    points: list[OperatingPoint]  # ascending threshold
    auprc: float
    positives: int
    total: int

    @property
    def prevalence(self) -> float:
        return self.positives / self.total


def _f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def _score_label_arrays(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.size != y.size:
        raise ValueError(f"{s.size} scores but {y.size} labels")
    if not y.any():
        raise ValueError("no positive labels; recall is undefined")
    return s, y


def pr_curve(scores, labels) -> PrCurve:
    """Operating points at each distinct score (predict positive when score >= threshold).

    AUPRC is average precision: sum of (R_i - R_{i-1}) * P_i over thresholds
    taken in descending order, with tied scores entering together.
    """
    s, y = _score_label_arrays(scores, labels)
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    tp_cum = np.cumsum(y_sorted)
    # last index of each run of equal scores
    ends = np.flatnonzero(np.r_[s_sorted[1:] != s_sorted[:-1], True])
    tp = tp_cum[ends]
    pp = ends + 1
    pos = int(y.sum())
    precision = tp / pp
    recall = tp / pos
    prev_recall = np.r_[0.0, recall[:-1]]
    auprc = float(np.sum((recall - prev_recall) * precision))
    points = [
        OperatingPoint(float(s_sorted[e]), float(p), float(r), _f1(float(p), float(r)),
                       int(t), int(n - t), int(pos - t))
        for e, p, r, t, n in zip(ends, precision, recall, tp, pp)
    ]
    points.reverse()
    return PrCurve(points, auprc, pos, int(s.size))


def operating_point(scores, labels, tau: float) -> OperatingPoint:
    """Router semantics: predict sink when score > tau (strict)."""
    s, y = _score_label_arrays(scores, labels)
    pred = s > tau
    tp = int(np.sum(pred & y))
    fp = int(np.sum(pred & ~y))
    fn = int(np.sum(~pred & y))
    p = tp / (tp + fp) if tp + fp else 1.0
    r = tp / (tp + fn)
    return OperatingPoint(float(tau), p, r, _f1(p, r), tp, fp, fn)


@dataclass(frozen=True)
class ConcentrationStats:
    bos_score: float
    max_nonbos: float
    mean_nonbos: float
    ratio: float


def concentration_stats(weight_row, bos_index: int = 0) -> ConcentrationStats:
    row = np.asarray(weight_row, dtype=np.float64).ravel()
    if row.size < 2:
        raise ValueError("need at least 2 tokens (BOS plus one other)")
    rest = np.delete(row, bos_index)
    bos, mx = float(row[bos_index]), float(rest.max())
    ratio = bos / mx if mx > 0 else float("inf")
    return ConcentrationStats(bos, mx, float(rest.mean()), ratio)


def aggregate_concentration(rows, bos_index: int = 0, mode: str = "mean-of-ratios") -> ConcentrationStats:
    """Field-wise means over rows.

    ``mean-of-ratios`` averages the per-row ratio; ``ratio-of-means`` divides
    the mean BOS score by the mean max non-BOS score.
    """
    stats = [concentration_stats(r, bos_index) for r in rows]
    if not stats:
        raise ValueError("no rows")
    bos = float(np.mean([s.bos_score for s in stats]))
    mx = float(np.mean([s.max_nonbos for s in stats]))
    mean = float(np.mean([s.mean_nonbos for s in stats]))
    if mode == "mean-of-ratios":
        ratio = float(np.mean([s.ratio for s in stats]))
    elif mode == "ratio-of-means":
        ratio = bos / mx if mx > 0 else float("inf")
    else:
        raise ValueError(f"unknown aggregation mode {mode!r}")
    return ConcentrationStats(bos, mx, mean, ratio)


def norm_stats(rows, bos_index: int = 0) -> tuple[float, float]:
    """(L2 norm of the BOS row, mean L2 norm of the other rows)."""
    x = np.asarray(rows, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError(f"need [N >= 2, D] rows, got shape {x.shape}")
    norms = np.linalg.norm(x, axis=1)
    return float(norms[bos_index]), float(np.delete(norms, bos_index).mean())


@dataclass(frozen=True)
class KeyGeometry:
    mean_cos_within_bos: float
    mean_cos_bos_to_rest: float
    bos_centroid_to_global_mean: float


def key_geometry_stats(keys, bos_rows) -> KeyGeometry:
    """Cosine cohesion of BOS keys, their cosine to other keys, and centroid offset."""
    x = np.asarray(keys, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected keys [N, D], got shape {x.shape}")
    is_bos = np.zeros(x.shape[0], dtype=bool)
    is_bos[list(bos_rows)] = True
    norms = np.linalg.norm(x, axis=1)
    zero = norms == 0
    if zero.any():
        warnings.warn(f"excluding {int(zero.sum())} zero-norm key rows from geometry stats", stacklevel=2)
    keep = ~zero
    bos, rest = x[is_bos & keep], x[~is_bos & keep]
    if bos.shape[0] < 2 or rest.shape[0] < 2:
        raise ValueError("need >= 2 non-zero BOS rows and >= 2 non-zero other rows")
    ub = bos / np.linalg.norm(bos, axis=1, keepdims=True)
    ur = rest / np.linalg.norm(rest, axis=1, keepdims=True)
    gram = ub @ ub.T
    nb = ub.shape[0]
    within = (gram.sum() - np.trace(gram)) / (nb * (nb - 1))
    across = float((ub @ ur.T).mean())
    dist = float(np.linalg.norm(bos.mean(axis=0) - x[keep].mean(axis=0)))
    return KeyGeometry(float(within), across, dist)


@dataclass(frozen=True)
class ResidualMetrics:
    r_res: float
    a_align: float
    epsilon: float
    degenerate: bool = False


def residual_metrics(c, r_in, delta_r_attn, epsilon: float = 1e-8) -> ResidualMetrics:
    """Residual write size ||c|| / (||r_in|| + eps) and cos(c, delta_r_attn)."""
    c = np.asarray(c, dtype=np.float64).ravel()
    r_in = np.asarray(r_in, dtype=np.float64).ravel()
    delta = np.asarray(delta_r_attn, dtype=np.float64).ravel()
    if not c.shape == r_in.shape == delta.shape:
        raise ValueError(f"dimension mismatch: {c.shape}, {r_in.shape}, {delta.shape}")
    cn, dn = np.linalg.norm(c), np.linalg.norm(delta)
    r_res = float(cn / (np.linalg.norm(r_in) + epsilon))
    if cn < 1e-12 or dn < 1e-12:
        return ResidualMetrics(r_res, 0.0, epsilon, True)
    align = float(np.clip(c @ delta / (cn * dn), -1.0, 1.0))
    return ResidualMetrics(r_res, align, epsilon, False)


@dataclass(frozen=True)
class BoundReport:
    delta: float
    epsilon_v: float
    v_max: float
    u_norm: float
    bound: float
    holds: bool
    precondition_ok: bool


def check_update_bound(weight_row, values, epsilon_v: float, bos_index: int = 0) -> BoundReport:
    """Check ||sum_i alpha_i v_i|| <= eps_v + (1 - alpha_0) * max_{i != 0} ||v_i||."""
    alpha = _rows(weight_row)[0]
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2 or v.shape[0] != alpha.size:
        raise ValueError(f"values must be [{alpha.size}, D], got {v.shape}")
    delta = 1.0 - float(alpha[bos_index])
    norms = np.linalg.norm(v, axis=1)
    others = np.delete(norms, bos_index)
    v_max = float(others.max()) if others.size else 0.0
    u_norm = float(np.linalg.norm(alpha @ v))
    bound = epsilon_v + delta * v_max
    return BoundReport(delta, float(epsilon_v), v_max, u_norm, bound,
                       u_norm <= bound + BOUND_SLACK, bool(norms[bos_index] <= epsilon_v))
