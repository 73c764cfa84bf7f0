"""Overlap metrics on integer label maps."""

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation


@dataclass(frozen=True)
class DiceResult:
    per_class: tuple  # Dice per class; nan where the class is absent from both maps
    mean: float


def dice_score(pred_labels, true_labels, n_classes, include_background=False,
               empty_as_one=False):
    """Per-class Dice ``2|P_c & T_c| / (|P_c| + |T_c|)`` and their mean.

    The mean runs over foreground classes ``1..K-1`` unless
    ``include_background``. Classes empty in both maps are left out of the mean,
    or counted as 1.0 with ``empty_as_one``. If every class is empty the mean is 1.0.
    """
    pred = np.asarray(pred_labels)
    true = np.asarray(true_labels)
    if pred.shape != true.shape:
        raise ContractViolation(f"label maps differ in shape: {pred.shape} vs {true.shape}")
    for arr in (pred, true):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise ContractViolation(f"labels must lie in [0, {n_classes})")
    per_class = []
    for c in range(n_classes):
        p = pred == c
        t = true == c
        denom = int(p.sum()) + int(t.sum())
        if denom == 0:
            per_class.append(1.0 if empty_as_one else float("nan"))
        else:
            per_class.append(2.0 * int((p & t).sum()) / denom)
    scored = per_class if include_background else per_class[1:]
    if not scored:
        scored = per_class
    finite = [v for v in scored if not np.isnan(v)]
    mean = float(np.mean(finite)) if finite else 1.0
    return DiceResult(tuple(per_class), mean)


def argmax_labels(logits):
    """Class index per position; ties resolve to the lowest index."""
    return np.asarray(logits).argmax(axis=1)


def dice_per_sample(pred_labels, true_labels, n_classes, include_background=False):
    """Vectorized Dice over a batch of (N, L) label maps.

    Returns ``(mean_dice, per_class)`` where ``mean_dice`` averages each
    sample's foreground mean over samples and ``per_class`` averages each
    class over the samples in which it is present in prediction or truth.
    """
    pred = np.asarray(pred_labels)
    true = np.asarray(true_labels)
    if pred.shape != true.shape or pred.ndim != 2:
        raise ContractViolation("expected two (N, L) label maps of equal shape")
    scores = np.full((pred.shape[0], n_classes), np.nan)
    for c in range(n_classes):
        p = pred == c
        t = true == c
        denom = p.sum(axis=1) + t.sum(axis=1)
        inter = (p & t).sum(axis=1)
        ok = denom > 0
        scores[ok, c] = 2.0 * inter[ok] / denom[ok]
    cols = scores if include_background or n_classes == 1 else scores[:, 1:]
    with np.errstate(all="ignore"):
        valid = ~np.isnan(cols)
        counts = valid.sum(axis=1)
        sample_mean = np.where(counts > 0, np.nansum(cols, axis=1) / np.maximum(counts, 1), 1.0)
        per_class = tuple(float(np.nanmean(scores[:, c])) if (~np.isnan(scores[:, c])).any()
                          else float("nan") for c in range(n_classes))
    return float(sample_mean.mean()), per_class
