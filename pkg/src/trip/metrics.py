import numpy as np
from scipy.stats import rankdata


def _check(a, b):
    a, b = np.asarray(a), np.asarray(b)
    if len(a) == 0:
        raise ValueError("empty input")
    if len(a) != len(b):
        raise ValueError(f"length mismatch: {len(a)} vs {len(b)}")
    return a, b


def accuracy(preds, labels) -> float:
    """Fraction correct. 2-D ``preds`` are scores; argmax breaks ties toward the lowest class."""
    preds, labels = _check(preds, labels)
    if preds.ndim == 2:
        preds = np.argmax(preds, axis=1)
    return float(np.mean(preds == labels))


def auc(scores, labels) -> float:
    """Area under the ROC curve via the Mann-Whitney statistic; ties count one half.

    ``scores`` may be a vector of positive-class scores or an ``(N, 2)`` array,
    in which case column 1 is used.
    """
    scores, labels = _check(scores, labels)
    if scores.ndim == 2:
        scores = scores[:, 1]
    labels = np.asarray(labels).astype(int)
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def rmse(preds, targets) -> float:
    preds, targets = _check(preds, targets)
    return float(np.sqrt(np.mean((preds.astype(float) - targets.astype(float)) ** 2)))
