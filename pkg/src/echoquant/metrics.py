"""Evaluation metrics: Dice coefficient, PCK and Pearson correlation."""
import warnings

import numpy as np

from .heatmap import pck

__all__ = ["dice_coefficient", "pearson", "pck"]


def dice_coefficient(pred, gt) -> float:
    """Dice of two binary masks; two empty masks score 1."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    denom = pred.sum() + gt.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(pred, gt).sum() / denom)


def pearson(x, y) -> float:
    """Pearson r over pairs where both values are finite.

    Zero variance on either side gives NaN (with a warning) instead of 0.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    ok = np.isfinite(x) & np.isfinite(y)
    x, y = x[ok], y[ok]
    if x.size < 2:
        warnings.warn("fewer than two finite pairs; correlation undefined", RuntimeWarning, stacklevel=2)
        return float("nan")
    dx = x - x.mean()
    dy = y - y.mean()
    sx = np.sqrt(np.sum(dx * dx))
    sy = np.sqrt(np.sum(dy * dy))
    # test constancy on the raw values: centring identical floats can leave rounding residue
    if np.ptp(x) == 0 or np.ptp(y) == 0 or sx == 0 or sy == 0:
        warnings.warn("zero variance; correlation undefined", RuntimeWarning, stacklevel=2)
        return float("nan")
    return float(np.clip(np.sum(dx * dy) / (sx * sy), -1.0, 1.0))
