"""Co-saliency evaluation measures.

Conventions: ``pred`` is a soft map in [0, 1], ``gt`` a binary map.
Threshold sweeps use ``n`` uniform thresholds ``k / n`` in [0, 1) and
binarize with ``pred >= threshold``.
"""
from __future__ import annotations

import numpy as np

from cosalkit.errors import ShapeError, ValidationError

EPS = np.finfo(np.float64).eps


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    return pred, gt.astype(bool)


def thresholds(n: int = 256) -> np.ndarray:
    return np.arange(n) / n


def iou(pred, gt) -> float:
    p, g = _pair(pred, gt)
    p = p.astype(bool)
    union = np.count_nonzero(p | g)
    if union == 0:
        return 1.0
    return np.count_nonzero(p & g) / union


def success_rate(ious, cutoff: float = 0.5) -> float:
    ious = np.asarray(list(ious), dtype=np.float64)
    if ious.size == 0:
        raise ValidationError("success_rate needs at least one IoU")
    return float(np.mean(ious > cutoff))


def mae(pred, gt) -> float:
    p, g = _pair(pred, gt)
    return float(np.mean(np.abs(p - g)))


def _confusion_counts(pred, gt, n_thresholds):
    """True/false positive counts for every threshold, via a histogram."""
    p, g = _pair(pred, gt)
    # pixel with bin b is predicted positive for thresholds 0..b
    bins = np.clip(np.searchsorted(thresholds(n_thresholds), p, side="right") - 1, 0, None)
    fg_hist = np.bincount(bins[g], minlength=n_thresholds)
    bg_hist = np.bincount(bins[~g], minlength=n_thresholds)
    tp = np.cumsum(fg_hist[::-1])[::-1]
    fp = np.cumsum(bg_hist[::-1])[::-1]
    return tp.astype(np.float64), fp.astype(np.float64), float(g.sum()), g


def f_curve(pred, gt, beta_sq: float = 0.3, n_thresholds: int = 256) -> np.ndarray:
    tp, fp, n_fg, _ = _confusion_counts(pred, gt, n_thresholds)
    if n_fg == 0:
        return np.zeros(n_thresholds)
    predicted = tp + fp
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = tp / n_fg
    denom = beta_sq * precision + recall
    return np.divide((1 + beta_sq) * precision * recall, denom,
                     out=np.zeros_like(tp), where=denom > 0)


def max_f_measure(pred, gt, beta_sq: float = 0.3, n_thresholds: int = 256) -> float:
    """Maximum F-beta over the threshold sweep; 0 for an empty ground truth."""
    return float(f_curve(pred, gt, beta_sq, n_thresholds).max())


def e_curve(pred, gt, n_thresholds: int = 256) -> np.ndarray:
    tp, fp, n_fg, g = _confusion_counts(pred, gt, n_thresholds)
    n = g.size
    n_bg = n - n_fg
    if n_fg == 0:
        return 1.0 - (tp + fp) / n
    if n_bg == 0:
        return (tp + fp) / n
    # For a binarized map B and mask G, bias-centred values only take four
    # distinct (B, G) combinations, so the enhanced-alignment mean reduces
    # to a weighted sum over the confusion-matrix cells.
    mu_g = n_fg / n
    mu_b = (tp + fp) / n
    fn = n_fg - tp
    tn = n_bg - fp
    total = np.zeros(n_thresholds)
    for count, b_val, g_val in ((tp, 1.0, 1.0), (fp, 1.0, 0.0), (fn, 0.0, 1.0), (tn, 0.0, 0.0)):
        phi_b = b_val - mu_b
        phi_g = g_val - mu_g
        align = 2 * phi_b * phi_g / (phi_b ** 2 + phi_g ** 2 + EPS)
        total += count * (align + 1) ** 2 / 4
    return total / n


def e_measure_max(pred, gt, n_thresholds: int = 256) -> float:
    return float(e_curve(pred, gt, n_thresholds).max())


def _s_object(values, mask):
    x = values[mask]
    if x.size == 0:
        return 0.0
    mean = x.mean()
    std = x.std(ddof=1) if x.size > 1 else 0.0
    return 2 * mean / (mean ** 2 + 1 + std + EPS)


def _object_score(pred, gt):
    fg = np.where(gt, pred, 0.0)
    bg = np.where(~gt, 1.0 - pred, 0.0)
    u = gt.mean()
    return u * _s_object(fg, gt) + (1 - u) * _s_object(bg, ~gt)


def _ssim(pred, gt):
    n = pred.size
    # a constant block must give exactly zero variance, whatever mean() rounds to
    x = pred.flat[0] if np.ptp(pred) == 0 else pred.mean()
    y = gt.mean()
    sx = ((pred - x) ** 2).sum() / (n - 1 + EPS)
    sy = ((gt - y) ** 2).sum() / (n - 1 + EPS)
    sxy = ((pred - x) * (gt - y)).sum() / (n - 1 + EPS)
    alpha = 4 * x * y * sxy
    beta = (x ** 2 + y ** 2) * (sx + sy)
    if alpha != 0:
        return alpha / (beta + EPS)
    return 1.0 if beta == 0 else 0.0


def centroid(gt) -> tuple:
    """1-based (row, col) split point, rounded half away from zero."""
    h, w = gt.shape
    total = gt.sum()
    if total == 0:
        return int(np.floor(h / 2 + 0.5)), int(np.floor(w / 2 + 0.5))
    rows, cols = np.nonzero(gt)
    return int(np.floor(rows.mean() + 1 + 0.5)), int(np.floor(cols.mean() + 1 + 0.5))


def _region_score(pred, gt):
    h, w = gt.shape
    y, x = centroid(gt)
    area = h * w
    gtf = gt.astype(np.float64)
    score = 0.0
    for rs, cs in ((slice(0, y), slice(0, x)), (slice(0, y), slice(x, w)),
                   (slice(y, h), slice(0, x)), (slice(y, h), slice(x, w))):
        block = pred[rs, cs]
        if block.size:
            score += block.size / area * _ssim(block, gtf[rs, cs])
    return score


def s_measure(pred, gt, alpha: float = 0.5) -> float:
    """Structure measure: mix of object-aware and region-aware similarity."""
    p, g = _pair(pred, gt)
    y = g.mean()
    if y == 0:
        score = 1.0 - p.mean()
    elif y == 1:
        score = p.mean()
    else:
        score = alpha * _object_score(p, g) + (1 - alpha) * _region_score(p, g)
    return float(np.clip(score, 0.0, 1.0))
