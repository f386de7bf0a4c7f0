"""Uncertainty-quality and geometry metrics.

Rank-based metrics (risk-coverage/AURC, sparsification/AUSE, Spearman rho,
AUROC) depend on the uncertainty scores only through their ordering; ties
are always broken by the stable pixel index so results are deterministic.
Every curve/rank metric has a brute-force twin in the test suite.
"""

import csv
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import rankdata

from . import kernels
from .exceptions import (
    EmptyInputError,
    InvalidInputError,
    UndefinedMetricError,
    UnsupportedLikelihoodError,
    UsageError,
)

_LOG_2PI = float(np.log(2.0 * np.pi))

DEFAULT_GRID_SIZE = 100
DEFAULT_PC_THRESHOLD = 0.05


@dataclass(frozen=True)
class CurveSeries:
    """A ranking curve under the predicted-uncertainty ordering and under
    the true-error (oracle) ordering, on a shared fraction grid."""

    x: np.ndarray
    y_unc: np.ndarray
    y_oracle: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        if x.ndim != 1 or np.any(np.diff(x) <= 0):
            raise InvalidInputError("curve grid must be strictly increasing")
        if not (np.all(np.isfinite(self.y_unc))
                and np.all(np.isfinite(self.y_oracle))):
            raise InvalidInputError("curve values must be finite")


def _flat_valid(arr, mask=None):
    arr = np.asarray(arr, dtype=np.float64)
    if mask is None:
        return arr.reshape(-1)
    mask = np.asarray(mask, dtype=bool)
    return arr[mask].reshape(-1)


def mae_rmse(e, mask=None):
    """Mean and root-mean-square 3D error over valid pixels."""
    vals = _flat_valid(e, mask)
    if vals.size == 0:
        raise EmptyInputError("no valid pixels for MAE/RMSE")
    return float(vals.mean()), float(np.sqrt((vals * vals).mean()))


def spearman_rho(u, e, mask=None):
    """Pearson correlation of average-tied ranks; undefined (raises) when
    either side has constant ranks."""
    u = _flat_valid(u, mask)
    e = _flat_valid(e, mask)
    if u.shape != e.shape:
        raise UsageError("uncertainty and error vectors differ in length")
    if u.size < 2:
        raise UndefinedMetricError("Spearman rho needs at least 2 pixels")
    ru = rankdata(u, method="average")
    re = rankdata(e, method="average")
    if np.ptp(ru) == 0 or np.ptp(re) == 0:
        raise UndefinedMetricError(
            "Spearman rho undefined for constant rankings")
    ru = ru - ru.mean()
    re = re - re.mean()
    denom = np.sqrt((ru * ru).sum() * (re * re).sum())
    return float((ru * re).sum() / denom)


def _ranked_prefix_means(e, keys):
    """Cumulative means of e ordered by ascending keys (stable)."""
    order = np.argsort(keys, kind="stable")
    csum = np.cumsum(e[order])
    return csum / np.arange(1, e.size + 1)


def risk_coverage(u, e, grid_size=DEFAULT_GRID_SIZE, mask=None):
    """Risk-coverage curve: for coverage c, the mean error of the
    floor(c*N) lowest-uncertainty pixels (oracle: lowest-error pixels).

    Grid points whose retained set is empty take the first defined value.
    """
    u = _flat_valid(u, mask)
    e = _flat_valid(e, mask)
    if e.size == 0:
        raise EmptyInputError("no valid pixels for risk-coverage")
    if grid_size < 2:
        raise UsageError("grid_size must be >= 2")
    n = e.size
    means_u = _ranked_prefix_means(e, u)
    means_e = _ranked_prefix_means(e, e)
    ks = np.arange(1, grid_size + 1) * n // grid_size  # floor(c*N), exact
    x = np.arange(1, grid_size + 1) / grid_size
    first = int(np.argmax(ks > 0))
    ks_eff = np.maximum(ks, ks[first])
    return CurveSeries(x=x, y_unc=means_u[ks_eff - 1],
                       y_oracle=means_e[ks_eff - 1])


def _trapezoid(y, x):
    return float(np.sum((y[1:] + y[:-1]) * 0.5 * np.diff(x)))


def aurc(curve):
    """Area under the uncertainty-ranked risk-coverage curve, extended to
    coverage 0 by its first value."""
    x = np.concatenate([[0.0], curve.x])
    y = np.concatenate([[curve.y_unc[0]], curve.y_unc])
    return _trapezoid(y, x)


def oracle_aurc(curve):
    x = np.concatenate([[0.0], curve.x])
    y = np.concatenate([[curve.y_oracle[0]], curve.y_oracle])
    return _trapezoid(y, x)


def _descending_order(u):
    # descending uncertainty, ties broken by ascending pixel index
    return np.lexsort((np.arange(u.size), -u))


def sparsification(u, e, grid_size=DEFAULT_GRID_SIZE, mask=None):
    """Sparsification curve: after removing the ceil(s*N) highest-uncertainty
    pixels, the mean error of the remainder (oracle removes by true error).

    s runs over k/grid_size for k = 0..grid_size-1; grid points that would
    remove every pixel are dropped (the s = 1 endpoint is excluded for the
    same reason).
    """
    u = _flat_valid(u, mask)
    e = _flat_valid(e, mask)
    if e.size == 0:
        raise EmptyInputError("no valid pixels for sparsification")
    if grid_size < 2:
        raise UsageError("grid_size must be >= 2")
    n = e.size
    total = e.sum()

    def remaining_means(keys):
        removed = np.concatenate([[0.0], np.cumsum(e[_descending_order(keys)])])
        ks = np.arange(grid_size)
        r = -(-ks * n // grid_size)  # ceil(s*N) in exact integer arithmetic
        keep = n - r
        k_ok = keep > 0
        return (total - removed[r[k_ok]]) / keep[k_ok], k_ok

    y_unc, k_ok = remaining_means(u)
    y_oracle, _ = remaining_means(e)
    x = (np.arange(grid_size) / grid_size)[k_ok]
    return CurveSeries(x=x, y_unc=y_unc, y_oracle=y_oracle)


def ause(curve):
    """Area between the uncertainty-ranked and oracle sparsification curves."""
    return _trapezoid(curve.y_unc - curve.y_oracle, curve.x)


def eval_nll(kind, maps, gt, mask, eps=1e-6):
    """Mean negative log-density over valid pixels, in the raw frame.

    ``kind`` selects the likelihood: "niw" (multivariate Student-t via the
    11-channel raw map), "nig" (univariate Student-t summed over axes via
    the 12-channel raw map), "hetero" (diagonal Gaussian from mean/log_var),
    or "gaussian_diag" (diagonal Gaussian from mean/variance, for
    moment-matched samplers).  Confidence-only sources define no likelihood.
    """
    if kind == "conf":
        raise UnsupportedLikelihoodError(
            "confidence-only readouts define no predictive likelihood")
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyInputError("no valid pixels for NLL")
    gt_v = np.ascontiguousarray(
        np.asarray(gt, dtype=np.float64)[mask].reshape(-1, 3))
    if kind == "niw":
        raw = np.ascontiguousarray(maps["raw"][mask].reshape(-1, 11))
        return float(kernels.niw_nll(raw, gt_v, eps).mean())
    if kind == "nig":
        raw = np.ascontiguousarray(maps["raw"][mask].reshape(-1, 12))
        return float(kernels.nig_nll(raw, gt_v, eps).mean())
    if kind == "hetero":
        mean = np.ascontiguousarray(maps["mean"][mask].reshape(-1, 3))
        log_var = np.ascontiguousarray(maps["log_var"][mask].reshape(-1, 3))
        loss, _, _ = kernels.hetero_loss_grad(mean, log_var, gt_v)
        return float(loss.mean())
    if kind == "gaussian_diag":
        mean = maps["mean"][mask].reshape(-1, 3)
        var = maps["var"][mask].reshape(-1, 3)
        if np.any(var <= 0):
            raise InvalidInputError("gaussian_diag needs positive variances")
        r = gt_v - mean
        nll = 0.5 * (np.log(var) + r * r / var + _LOG_2PI).sum(axis=1)
        return float(nll.mean())
    raise UsageError(f"unknown likelihood kind {kind!r}")


def pointcloud_metrics(pred_pts, gt_pts, threshold=DEFAULT_PC_THRESHOLD):
    """Accuracy / completeness / Chamfer / F1 between two point clouds.

    Nearest neighbors come from an exact k-d tree.  Accuracy is the mean
    distance pred->gt, completeness gt->pred, Chamfer their average; F1 is
    the harmonic mean of precision and recall at the threshold (0 when both
    vanish).
    """
    pred_pts = np.asarray(pred_pts, dtype=np.float64).reshape(-1, 3)
    gt_pts = np.asarray(gt_pts, dtype=np.float64).reshape(-1, 3)
    if pred_pts.size == 0 or gt_pts.size == 0:
        raise EmptyInputError("point clouds must be non-empty")
    if not threshold > 0:
        raise UsageError(f"threshold must be positive, got {threshold}")
    d_pred = cKDTree(gt_pts).query(pred_pts)[0]
    d_gt = cKDTree(pred_pts).query(gt_pts)[0]
    accuracy = float(d_pred.mean())
    completeness = float(d_gt.mean())
    chamfer = 0.5 * (accuracy + completeness)
    precision = float((d_pred <= threshold).mean())
    recall = float((d_gt <= threshold).mean())
    f1 = 0.0 if precision + recall == 0 \
        else 2.0 * precision * recall / (precision + recall)
    return accuracy, completeness, chamfer, f1


def _shifted(mask, di, dj):
    """Binary mask shifted by (di, dj) with background (False) fill."""
    h, w = mask.shape
    out = np.zeros_like(mask)
    src_i = slice(max(0, -di), min(h, h - di))
    src_j = slice(max(0, -dj), min(w, w - dj))
    dst_i = slice(max(0, di), min(h, h + di))
    dst_j = slice(max(0, dj), min(w, w + dj))
    out[dst_i, dst_j] = mask[src_i, src_j]
    return out


def ring_band(mask, radius):
    """dilate(mask, r) AND NOT erode(mask, r) with a (2r+1)^2 square
    structuring element; out-of-image counts as background for both."""
    if not (isinstance(radius, (int, np.integer)) and radius >= 1):
        raise UsageError(f"radius must be a positive integer, got {radius!r}")
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise UsageError(f"mask must be 2-D, got shape {mask.shape}")
    dil = np.zeros_like(mask)
    ero = np.ones_like(mask)
    for di in range(-radius, radius + 1):
        for dj in range(-radius, radius + 1):
            shifted = _shifted(mask, di, dj)
            dil |= shifted
            ero &= shifted
    return dil & ~ero


def auroc_fpr(scores, labels, region=None):
    """AUROC (rank statistic, ties get half credit) and the smallest false
    positive rate achievable at any threshold with TPR >= 0.95."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if region is not None:
        region = np.asarray(region, dtype=bool)
        scores = scores[region]
        labels = labels[region]
    scores = scores.reshape(-1)
    labels = labels.reshape(-1)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            f"AUROC undefined with {n_pos} positives / {n_neg} negatives")
    ranks = rankdata(scores, method="average")
    auroc = (ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)

    pos_sorted = np.sort(scores[labels])
    neg_sorted = np.sort(scores[~labels])
    thresholds = np.unique(scores)
    tpr = (n_pos - np.searchsorted(pos_sorted, thresholds, side="left")) / n_pos
    fpr = (n_neg - np.searchsorted(neg_sorted, thresholds, side="left")) / n_neg
    achievable = tpr >= 0.95
    fpr_at = float(fpr[achievable].min()) if achievable.any() else 1.0
    return float(auroc), fpr_at


def write_curve_csv(path, curve):
    """Curve CSV: header x,y_unc,y_oracle, one row per grid point."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y_unc", "y_oracle"])
        for x, yu, yo in zip(curve.x, curve.y_unc, curve.y_oracle):
            writer.writerow([format(v, ".12g") for v in (x, yu, yo)])


def read_curve_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["x", "y_unc", "y_oracle"]:
        raise UsageError(f"{path} is not a curve CSV")
    data = np.array([[float(v) for v in row] for row in rows[1:]])
    return CurveSeries(x=data[:, 0], y_unc=data[:, 1], y_oracle=data[:, 2])
