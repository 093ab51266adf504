"""Trajectory and classification metrics on pixel-space boxes."""

from __future__ import annotations

import math

import numpy as np

from .errors import DimensionError, InputError

TABLE_COLUMNS = ("ADE", "FDE", "ARB", "FRB", "Acc", "AUC", "F1", "Prec")


class UndefinedMetricError(InputError):
    pass


def _pair(pred, true):
    pred = np.asarray(pred, dtype=np.float64)
    true = np.asarray(true, dtype=np.float64)
    if pred.shape != true.shape or pred.ndim != 3 or pred.shape[-1] != 4:
        raise DimensionError(f"expected matching N x tau x 4 boxes, got {pred.shape} and {true.shape}")
    if pred.shape[0] == 0 or pred.shape[1] == 0:
        raise InputError("no boxes to score")
    return pred, true


def center_errors(pred, true):
    """N x tau Euclidean distances between box centers."""
    pred, true = _pair(pred, true)
    d = (pred[..., :2] + pred[..., 2:]) / 2 - (true[..., :2] + true[..., 2:]) / 2
    return np.sqrt((d * d).sum(axis=-1))


def box_rmse(pred, true):
    """N x tau RMSE over the four box coordinates."""
    pred, true = _pair(pred, true)
    return np.sqrt(((pred - true) ** 2).mean(axis=-1))


def ade_fde(pred, true):
    """(ADE, FDE): center error summed over samples and steps divided by N*tau; final step mean."""
    err = center_errors(pred, true)
    n, tau = err.shape
    return float(err.sum() / (n * tau)), float(err[:, -1].mean())


def arb_frb(pred, true):
    err = box_rmse(pred, true)
    n, tau = err.shape
    return float(err.sum() / (n * tau)), float(err[:, -1].mean())


def _scores_labels(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise DimensionError(f"{s.size} scores but {y.size} labels")
    if s.size == 0:
        raise InputError("no predictions to score")
    if not np.all((y == 0) | (y == 1)):
        raise InputError("labels must be 0 or 1")
    return s, y.astype(bool)


def roc_auc(scores, labels):
    """Probability that a random positive outscores a random negative (ties count one half).

    Computed from average ranks (Mann-Whitney U).
    """
    s, y = _scores_labels(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC is undefined when only one class is present")
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    ranks = np.empty(s.size, dtype=np.float64)
    # average 1-based rank within each run of tied scores
    starts = np.flatnonzero(np.r_[True, sorted_s[1:] != sorted_s[:-1]])
    ends = np.r_[starts[1:], s.size]
    avg = (starts + ends + 1) / 2.0
    ranks[order] = np.repeat(avg, ends - starts)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def confusion(scores, labels, threshold=0.5):
    s, y = _scores_labels(scores, labels)
    p = s >= threshold
    tp = int((p & y).sum())
    fp = int((p & ~y).sum())
    fn = int((~p & y).sum())
    tn = int((~p & ~y).sum())
    return tp, fp, fn, tn


def acc_f1_prec(scores, labels, threshold=0.5):
    """Accuracy, precision, recall, F1 and confusion counts at ``threshold``.

    AUC is included when both classes are present and NaN otherwise.
    """
    tp, fp, fn, tn = confusion(scores, labels, threshold)
    total = tp + fp + fn + tn
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * tp / (2 * tp + fp + fn) if tp + fp + fn else 0.0
    try:
        auc = roc_auc(scores, labels)
    except UndefinedMetricError:
        auc = math.nan
    return {"Acc": (tp + tn) / total, "AUC": auc, "F1": f1, "Prec": prec, "Recall": rec,
            "TP": tp, "FP": fp, "FN": fn, "TN": tn}


classification_metrics = acc_f1_prec


def trajectory_metrics(pred, true):
    ade, fde = ade_fde(pred, true)
    arb, frb = arb_frb(pred, true)
    return {"ADE": ade, "FDE": fde, "ARB": arb, "FRB": frb}
